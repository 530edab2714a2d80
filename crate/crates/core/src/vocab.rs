//! Abstract vocabulary, delimiter tokens and the data-embedding matrix.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeqRng;

pub type TokenId = u32;

/// Delimiter roles. Discriminants are the token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    InpStart = 3,
    InpEnd = 4,
    ThinkStart = 5,
    ThinkEnd = 6,
    AnsStart = 7,
    AnsEnd = 8,
}

pub const NUM_SPECIAL: u32 = 9;

impl Special {
    pub const ALL: [Special; NUM_SPECIAL as usize] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::InpStart,
        Special::InpEnd,
        Special::ThinkStart,
        Special::ThinkEnd,
        Special::AnsStart,
        Special::AnsEnd,
    ];

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn from_id(id: TokenId) -> Option<Special> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Pad => "pad",
            Special::Bos => "bos",
            Special::Eos => "eos",
            Special::InpStart => "inp_start",
            Special::InpEnd => "inp_end",
            Special::ThinkStart => "think_start",
            Special::ThinkEnd => "think_end",
            Special::AnsStart => "ans_start",
            Special::AnsEnd => "ans_end",
        }
    }

    /// Short bracketed form used by `inspect`.
    pub fn tag(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::InpStart => "<inp>",
            Special::InpEnd => "</inp>",
            Special::ThinkStart => "<think>",
            Special::ThinkEnd => "</think>",
            Special::AnsStart => "<ans>",
            Special::AnsEnd => "</ans>",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Special> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

/// Token ids `0..9` are the delimiters in [`Special`] order; `9..size` are
/// normal tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < NUM_SPECIAL + 1 {
            return Err(Error::config(format!(
                "vocabulary size {size} leaves no normal tokens (need at least {})",
                NUM_SPECIAL + 1
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn special(&self, role: Special) -> TokenId {
        role.id()
    }

    pub fn special_ids(&self) -> BTreeMap<&'static str, TokenId> {
        Special::ALL.iter().map(|s| (s.name(), s.id())).collect()
    }

    pub fn normal_ids(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIAL..self.size
    }

    pub fn num_normal(&self) -> u32 {
        self.size - NUM_SPECIAL
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < NUM_SPECIAL
    }

    pub fn is_normal(&self, id: TokenId) -> bool {
        (NUM_SPECIAL..self.size).contains(&id)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.size
    }

    pub fn sample_normal(&self, rng: &mut SeqRng) -> TokenId {
        NUM_SPECIAL + rng.below(self.num_normal() as u64) as TokenId
    }
}

const EMB_MAGIC: &[u8; 8] = b"CILEMB01";
pub const EMB_HEADER_LEN: usize = 32;

/// `rows × dim` matrix of i.i.d. standard normals, stored as `f32`.
///
/// A promoted `f64` copy is kept alongside for the chain-token arithmetic.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    seed: u64,
    data: Vec<f32>,
    promoted: Vec<f64>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.dim == other.dim
            && self.seed == other.seed
            && self.data.iter().map(|x| x.to_bits()).eq(other.data.iter().map(|x| x.to_bits()))
    }
}

impl EmbeddingMatrix {
    /// Row-major fill from a [`SeqRng`] seeded with `seed`.
    pub fn sample(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be >= 1"));
        }
        let rows = vocab.size() as usize;
        let mut rng = SeqRng::from_seed(seed);
        let data = (0..rows * dim)
            .map(|_| rng.standard_normal() as f32)
            .collect();
        Self::from_raw(rows, dim, seed, data)
    }

    pub fn from_raw(rows: usize, dim: usize, seed: u64, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::config("embedding matrix must be non-empty"));
        }
        if data.len() != rows * dim {
            return Err(Error::config(format!(
                "embedding data has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        let promoted = data.iter().map(|&x| x as f64).collect();
        Ok(Self {
            rows,
            dim,
            seed,
            data,
            promoted,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        let start = id as usize * self.dim;
        &self.promoted[start..start + self.dim]
    }

    /// Header: magic, `u64` seed, `u32` rows, `u32` dim, 8 reserved zero
    /// bytes; then `rows*dim` little-endian `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = [0u8; EMB_HEADER_LEN];
        header[..8].copy_from_slice(EMB_MAGIC);
        header[8..16].copy_from_slice(&self.seed.to_le_bytes());
        header[16..20].copy_from_slice(&(self.rows as u32).to_le_bytes());
        header[20..24].copy_from_slice(&(self.dim as u32).to_le_bytes());
        w.write_all(&header)?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; EMB_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Malformed(format!("embedding header: {e}")))?;
        if &header[..8] != EMB_MAGIC {
            return Err(Error::Malformed("bad embedding magic".into()));
        }
        let seed = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let rows = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let data = read_f32s(&mut r, rows * dim)?;
        Self::from_raw(rows, dim, seed, data)
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

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Malformed(format!("truncated f32 payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_partition() {
        let v = Vocabulary::new(1024).unwrap();
        assert_eq!(v.special_ids().len(), 9);
        assert_eq!(v.num_normal(), 1015);
        for id in 0..1024 {
            assert_ne!(v.is_special(id), v.is_normal(id));
        }
        assert!(!v.contains(1024));
    }

    #[test]
    fn minimal_and_too_small() {
        let v = Vocabulary::new(10).unwrap();
        assert_eq!(v.normal_ids().collect::<Vec<_>>(), vec![9]);
        assert!(matches!(Vocabulary::new(9), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn special_order_is_fixed() {
        assert_eq!(Special::Pad.id(), 0);
        assert_eq!(Special::Bos.id(), 1);
        assert_eq!(Special::Eos.id(), 2);
        assert_eq!(Special::AnsEnd.id(), 8);
        for s in Special::ALL {
            assert_eq!(Special::from_id(s.id()), Some(s));
            assert_eq!(Special::from_tag(s.tag()), Some(s));
        }
        assert_eq!(Special::from_id(9), None);
    }

    #[test]
    fn embedding_is_deterministic_and_shaped() {
        let v = Vocabulary::new(1024).unwrap();
        let a = EmbeddingMatrix::sample(&v, 10, 42).unwrap();
        let b = EmbeddingMatrix::sample(&v, 10, 42).unwrap();
        let c = EmbeddingMatrix::sample(&v, 10, 43).unwrap();
        assert_eq!(a.data().len(), 10240);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(
            EmbeddingMatrix::sample(&v, 0, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn column_moments() {
        let v = Vocabulary::new(1024).unwrap();
        let e = EmbeddingMatrix::sample(&v, 10, 2024).unwrap();
        let rows = e.rows() as f64;
        for col in 0..10 {
            let xs: Vec<f64> = (0..1024).map(|r| e.row(r)[col]).collect();
            let mean = xs.iter().sum::<f64>() / rows;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (rows - 1.0);
            assert!(mean.abs() <= 5.0 / rows.sqrt(), "col {col} mean {mean}");
            assert!((0.8..=1.2).contains(&var), "col {col} var {var}");
        }
    }

    #[test]
    fn binary_round_trip() {
        let v = Vocabulary::new(32).unwrap();
        let e = EmbeddingMatrix::sample(&v, 3, 99).unwrap();
        let mut buf = Vec::new();
        e.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), EMB_HEADER_LEN + 32 * 3 * 4);
        assert_eq!(&buf[..8], b"CILEMB01");
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 99);
        let back = EmbeddingMatrix::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, e);

        buf[0] = b'X';
        assert!(EmbeddingMatrix::read_from(buf.as_slice()).is_err());
    }
}
