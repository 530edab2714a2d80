//! Random-weight MLP token processors and single chain-token generation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeqRng;
use crate::vocab::{read_f32s, EmbeddingMatrix, TokenId, Vocabulary};

pub const DEFAULT_SLOPE: f32 = 0.01;
pub const DEFAULT_DEPTH: usize = 1;

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Bias-free MLP of `depth` square layers.
///
/// Hidden layers are followed by LeakyReLU; the last layer is linear, since
/// the activation on the final output is applied after averaging over
/// parents in [`chain_token`].
#[derive(Debug, Clone)]
pub struct Mlp {
    dim: usize,
    slope: f32,
    weights: Vec<Vec<f32>>,
    promoted: Vec<Vec<f64>>,
}

impl Mlp {
    /// `weights[l]` is a row-major `dim × dim` matrix.
    pub fn from_weights(dim: usize, slope: f32, weights: Vec<Vec<f32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("mlp dimension must be >= 1"));
        }
        if weights.is_empty() {
            return Err(Error::config("mlp depth must be >= 1"));
        }
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(Error::config(format!("leaky-relu slope {slope} outside (0, 1]")));
        }
        if let Some(w) = weights.iter().find(|w| w.len() != dim * dim) {
            return Err(Error::config(format!(
                "mlp layer has {} weights, expected {}",
                w.len(),
                dim * dim
            )));
        }
        let promoted = weights
            .iter()
            .map(|w| w.iter().map(|&x| x as f64).collect())
            .collect();
        Ok(Self {
            dim,
            slope,
            weights,
            promoted,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn slope(&self) -> f32 {
        self.slope
    }

    pub fn weights(&self) -> &[Vec<f32>] {
        &self.weights
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        let slope = self.slope as f64;
        let last = self.promoted.len() - 1;
        let mut cur = x.to_vec();
        for (l, w) in self.promoted.iter().enumerate() {
            let mut next: Vec<f64> = w
                .chunks_exact(self.dim)
                .map(|row| row.iter().zip(&cur).map(|(a, b)| a * b).sum())
                .collect();
            if l != last {
                next.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
            }
            cur = next;
        }
        cur
    }
}

/// Generates one chain token from its parents' token ids.
///
/// Each parent embedding goes through `mlp`; the outputs are averaged, passed
/// through LeakyReLU, and scored against every normal-token embedding. The
/// highest dot product wins, ties going to the smaller id.
pub fn chain_token(
    mlp: &Mlp,
    embedding: &EmbeddingMatrix,
    vocab: &Vocabulary,
    parent_ids: &[TokenId],
) -> Result<TokenId> {
    if parent_ids.is_empty() {
        return Err(Error::input("chain token needs at least one parent"));
    }
    if embedding.dim() != mlp.dim() {
        return Err(Error::input(format!(
            "embedding dim {} does not match mlp dim {}",
            embedding.dim(),
            mlp.dim()
        )));
    }
    if let Some(&bad) = parent_ids
        .iter()
        .find(|&&p| !vocab.contains(p) || p as usize >= embedding.rows())
    {
        return Err(Error::input(format!("parent token {bad} outside vocabulary")));
    }
    let dim = mlp.dim();
    let mut mean = vec![0.0f64; dim];
    for &p in parent_ids {
        for (m, h) in mean.iter_mut().zip(mlp.apply(embedding.row(p))) {
            *m += h;
        }
    }
    let scale = parent_ids.len() as f64;
    let slope = mlp.slope() as f64;
    let activated: Vec<f64> = mean.iter().map(|&m| leaky_relu(m / scale, slope)).collect();

    let mut best_id = vocab.normal_ids().start;
    let mut best = f64::NEG_INFINITY;
    for id in vocab.normal_ids() {
        let score: f64 = embedding
            .row(id)
            .iter()
            .zip(&activated)
            .map(|(a, b)| a * b)
            .sum();
        if score > best {
            best = score;
            best_id = id;
        }
    }
    Ok(best_id)
}

const MLP_MAGIC: &[u8; 8] = b"CILMLP01";
pub const MLP_HEADER_LEN: usize = 32;

/// Fixed pool of random-weight processors sampled from per sequence.
#[derive(Debug, Clone)]
pub struct TokenProcessorCache {
    seed: u64,
    processors: Vec<Mlp>,
}

impl PartialEq for TokenProcessorCache {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.processors.len() == other.processors.len()
            && self.processors.iter().zip(&other.processors).all(|(a, b)| {
                a.dim == b.dim
                    && a.slope.to_bits() == b.slope.to_bits()
                    && a.weights.len() == b.weights.len()
                    && a.weights.iter().flatten().map(|x| x.to_bits())
                        .eq(b.weights.iter().flatten().map(|x| x.to_bits()))
            })
    }
}

impl TokenProcessorCache {
    /// Weights are i.i.d. standard normals, filled processor by processor,
    /// layer by layer, row-major, from one stream seeded with `seed`.
    pub fn new(cache_size: usize, dim: usize, depth: usize, slope: f32, seed: u64) -> Result<Self> {
        if cache_size == 0 {
            return Err(Error::config("processor cache size must be >= 1"));
        }
        if dim == 0 || depth == 0 {
            return Err(Error::config("processor dim and depth must be >= 1"));
        }
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(Error::config(format!("leaky-relu slope {slope} outside (0, 1]")));
        }
        let mut rng = SeqRng::from_seed(seed);
        let processors = (0..cache_size)
            .map(|_| {
                let weights = (0..depth)
                    .map(|_| (0..dim * dim).map(|_| rng.standard_normal() as f32).collect())
                    .collect();
                Mlp::from_weights(dim, slope, weights)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, processors })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.processors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.processors.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&Mlp> {
        self.processors.get(idx)
    }

    pub fn processors(&self) -> &[Mlp] {
        &self.processors
    }

    /// `count` uniform draws with replacement; returns cache indices.
    pub fn sample_processors(&self, count: usize, rng: &mut SeqRng) -> Vec<usize> {
        (0..count).map(|_| rng.index(self.processors.len())).collect()
    }

    /// Header: magic, `u64` seed, `u32` count, `u32` dim, `u32` depth, `f32`
    /// slope; then every weight matrix as little-endian `f32`, row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let first = &self.processors[0];
        let mut header = [0u8; MLP_HEADER_LEN];
        header[..8].copy_from_slice(MLP_MAGIC);
        header[8..16].copy_from_slice(&self.seed.to_le_bytes());
        header[16..20].copy_from_slice(&(self.processors.len() as u32).to_le_bytes());
        header[20..24].copy_from_slice(&(first.dim as u32).to_le_bytes());
        header[24..28].copy_from_slice(&(first.depth() as u32).to_le_bytes());
        header[28..32].copy_from_slice(&first.slope.to_le_bytes());
        w.write_all(&header)?;
        for mlp in &self.processors {
            for x in mlp.weights.iter().flatten() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; MLP_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Malformed(format!("processor header: {e}")))?;
        if &header[..8] != MLP_MAGIC {
            return Err(Error::Malformed("bad processor cache magic".into()));
        }
        let seed = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let count = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let depth = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
        let slope = f32::from_le_bytes(header[28..32].try_into().unwrap());
        if count == 0 {
            return Err(Error::Malformed("empty processor cache".into()));
        }
        let processors = (0..count)
            .map(|_| {
                let weights = (0..depth)
                    .map(|_| read_f32s(&mut r, dim * dim))
                    .collect::<Result<Vec<_>>>()?;
                Mlp::from_weights(dim, slope, weights)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, processors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(dim: usize) -> Vec<f32> {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        w
    }

    #[test]
    fn cache_is_deterministic() {
        let a = TokenProcessorCache::new(64, 10, 1, 0.01, 5).unwrap();
        let b = TokenProcessorCache::new(64, 10, 1, 0.01, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(a.get(0).unwrap().depth(), DEFAULT_DEPTH);
        assert_ne!(a, TokenProcessorCache::new(64, 10, 1, 0.01, 6).unwrap());
    }

    #[test]
    fn invalid_cache_configs() {
        assert!(TokenProcessorCache::new(0, 10, 1, 0.01, 0).is_err());
        assert!(TokenProcessorCache::new(4, 0, 1, 0.01, 0).is_err());
        assert!(TokenProcessorCache::new(4, 10, 0, 0.01, 0).is_err());
        assert!(TokenProcessorCache::new(4, 10, 1, 0.0, 0).is_err());
        assert!(TokenProcessorCache::new(4, 10, 1, 1.5, 0).is_err());
        assert!(TokenProcessorCache::new(4, 10, 1, 1.0, 0).is_ok());
    }

    #[test]
    fn single_entry_cache_always_index_zero() {
        let cache = TokenProcessorCache::new(1, 4, 1, 0.01, 1).unwrap();
        let mut rng = SeqRng::from_seed(2);
        assert_eq!(cache.sample_processors(5, &mut rng), vec![0; 5]);
    }

    #[test]
    fn sample_indices_in_range() {
        let cache = TokenProcessorCache::new(64, 2, 1, 0.01, 1).unwrap();
        let mut rng = SeqRng::from_seed(3);
        let idx = cache.sample_processors(4, &mut rng);
        assert_eq!(idx.len(), 4);
        assert!(idx.iter().all(|&i| i < 64));
    }

    #[test]
    fn orthonormal_rows_identity_weights_return_parent() {
        let size = 12;
        let vocab = Vocabulary::new(size).unwrap();
        let emb = EmbeddingMatrix::from_raw(size as usize, size as usize, 0, identity(size as usize))
            .unwrap();
        let mlp = Mlp::from_weights(size as usize, 0.01, vec![identity(size as usize)]).unwrap();
        for p in vocab.normal_ids() {
            assert_eq!(chain_token(&mlp, &emb, &vocab, &[p]).unwrap(), p);
        }
    }

    #[test]
    fn tie_goes_to_smallest_id() {
        // Rows 9, 10 and 11 are identical, so every score ties among them.
        let vocab = Vocabulary::new(12).unwrap();
        let mut data = vec![0.0f32; 12 * 2];
        for r in 9..12 {
            data[r * 2] = 1.0;
        }
        let emb = EmbeddingMatrix::from_raw(12, 2, 0, data).unwrap();
        let mlp = Mlp::from_weights(2, 0.01, vec![identity(2)]).unwrap();
        assert_eq!(chain_token(&mlp, &emb, &vocab, &[10]).unwrap(), 9);
    }

    #[test]
    fn empty_and_out_of_range_parents() {
        let vocab = Vocabulary::new(16).unwrap();
        let emb = EmbeddingMatrix::sample(&vocab, 3, 1).unwrap();
        let cache = TokenProcessorCache::new(1, 3, 1, 0.01, 1).unwrap();
        let mlp = cache.get(0).unwrap();
        assert!(matches!(
            chain_token(mlp, &emb, &vocab, &[]),
            Err(Error::InvalidInput(_))
        ));
        assert!(chain_token(mlp, &emb, &vocab, &[16]).is_err());
    }

    #[test]
    fn output_normal_and_parent_order_irrelevant() {
        let vocab = Vocabulary::new(200).unwrap();
        let emb = EmbeddingMatrix::sample(&vocab, 10, 8).unwrap();
        let cache = TokenProcessorCache::new(8, 10, 1, 0.01, 9).unwrap();
        let mut rng = SeqRng::from_seed(10);
        for _ in 0..200 {
            let mlp = cache.get(rng.index(8)).unwrap();
            let parents: Vec<TokenId> = (0..3).map(|_| rng.below(200) as TokenId).collect();
            let y = chain_token(mlp, &emb, &vocab, &parents).unwrap();
            assert!(vocab.is_normal(y));
            let mut rev = parents.clone();
            rev.reverse();
            assert_eq!(chain_token(mlp, &emb, &vocab, &rev).unwrap(), y);
            assert_eq!(chain_token(mlp, &emb, &vocab, &parents).unwrap(), y);
        }
    }

    #[test]
    fn deeper_mlp_applies_hidden_activation() {
        // Layer 1 negates, hidden LeakyReLU squashes, layer 2 negates back.
        let neg = vec![-1.0f32, 0.0, 0.0, -1.0];
        let mlp = Mlp::from_weights(2, 0.5, vec![neg.clone(), neg]).unwrap();
        assert_eq!(mlp.apply(&[1.0, -2.0]), vec![0.5, -2.0]);
    }

    #[test]
    fn binary_round_trip() {
        let cache = TokenProcessorCache::new(3, 4, 2, 0.01, 77).unwrap();
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), MLP_HEADER_LEN + 3 * 2 * 16 * 4);
        assert_eq!(&buf[..8], b"CILMLP01");
        let back = TokenProcessorCache::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, cache);
        assert!(TokenProcessorCache::read_from(&buf[..40]).is_err());
    }
}
