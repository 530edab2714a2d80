//! Abstract-token sequences: example rendering, parsing, loss masks and
//! seeded dataset generation.
//!
//! Example layouts (`x` inputs, `y` chain, `y_C` answer):
//!
//! ```text
//! standard: inp_start x.. inp_end ans_start y_C ans_end eos                        N+6
//! cot:      inp_start x.. inp_end think_start y_1..y_{C-1} think_end
//!           ans_start y_C ans_end eos                                            N+C+7
//! ```
//!
//! A sequence is `bos` followed by `K` examples. The loss mask marks
//! `ans_start y_C ans_end eos` of standard examples and everything from
//! `think_start` onwards of CoT examples.
//!
//! Sequence `j` draws from its own stream keyed by `(master_seed, j)`, in
//! this order: `N`, `M`, `C` (uniform over each choice set), the DAG, the `C`
//! processor indices, then per example the `N` input tokens followed by the
//! CoT coin `u` in `(0, 1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{sample_dag, Dag};
use crate::error::{Error, Result};
use crate::processor::{chain_token, TokenProcessorCache, DEFAULT_DEPTH, DEFAULT_SLOPE};
use crate::recipe::Recipe;
use crate::rng::{derive_seed, domain, SeqRng};
use crate::vocab::{EmbeddingMatrix, Special, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_vocab_size")]
    pub vocab_size: u32,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub n_choices: Vec<usize>,
    pub m_choices: Vec<usize>,
    pub c_choices: Vec<usize>,
    pub k: usize,
    pub t: u64,
    pub recipe: Recipe,
    #[serde(default = "default_cache_size")]
    pub cache_size: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_slope")]
    pub slope: f32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
}

fn default_vocab_size() -> u32 {
    1024
}
fn default_dim() -> usize {
    10
}
fn default_cache_size() -> usize {
    1024
}
fn default_depth() -> usize {
    DEFAULT_DEPTH
}
fn default_slope() -> f32 {
    DEFAULT_SLOPE
}
fn default_shard_size() -> usize {
    10_000
}

impl DatasetConfig {
    /// Single-valued `N = M = C` choice sets with the remaining fields at
    /// their defaults.
    pub fn simple(n: usize, m: usize, c: usize, k: usize, t: u64, recipe: Recipe, seed: u64) -> Self {
        Self {
            vocab_size: default_vocab_size(),
            dim: default_dim(),
            n_choices: vec![n],
            m_choices: vec![m],
            c_choices: vec![c],
            k,
            t,
            recipe,
            cache_size: default_cache_size(),
            depth: default_depth(),
            slope: default_slope(),
            master_seed: seed,
            shuffle: false,
            shard_size: default_shard_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab_size)?;
        for (name, set) in [
            ("n_choices", &self.n_choices),
            ("m_choices", &self.m_choices),
            ("c_choices", &self.c_choices),
        ] {
            if set.is_empty() {
                return Err(Error::config(format!("{name} must not be empty")));
            }
            if set.contains(&0) {
                return Err(Error::config(format!("{name} members must be >= 1")));
            }
        }
        if self.k == 0 || self.t == 0 {
            return Err(Error::config("K and T must be >= 1"));
        }
        if self.dim == 0 || self.cache_size == 0 || self.depth == 0 {
            return Err(Error::config("dim, cache_size and depth must be >= 1"));
        }
        if !(self.slope > 0.0 && self.slope <= 1.0) {
            return Err(Error::config(format!("slope {} outside (0, 1]", self.slope)));
        }
        if self.shard_size == 0 {
            return Err(Error::config("shard_size must be >= 1"));
        }
        self.recipe.validate()
    }

    pub fn embedding_seed(&self) -> u64 {
        derive_seed(self.master_seed, domain::EMBEDDING, 0)
    }

    pub fn cache_seed(&self) -> u64 {
        derive_seed(self.master_seed, domain::PROCESSORS, 0)
    }

    pub fn sequence_seed(&self, j: u64) -> u64 {
        derive_seed(self.master_seed, domain::SEQUENCE, j)
    }

    /// Output position → sequence id. Identity unless `shuffle` is set, in
    /// which case it is a permutation drawn from seed `master_seed + 1`.
    pub fn output_order(&self) -> Vec<u64> {
        if self.shuffle {
            SeqRng::from_seed(self.master_seed.wrapping_add(1))
                .permutation(self.t as usize)
                .into_iter()
                .map(|i| i as u64)
                .collect()
        } else {
            (0..self.t).collect()
        }
    }
}

/// One in-context example before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Vec<TokenId>,
    pub chain: Vec<TokenId>,
    pub is_cot: bool,
    pub uniform_draw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub k: usize,
    pub r_cot: f64,
    pub dag: Dag,
    pub proc_ids: Vec<usize>,
    pub cot_flags: Vec<bool>,
    pub seed: u64,
    pub u_draws: Vec<f64>,
    /// Full chain of every example, including intermediates of standard
    /// examples that do not appear in the tokens.
    pub chains: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub seq_id: u64,
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<u8>,
    pub meta: SequenceMeta,
}

fn check_normal(tokens: &[TokenId], vocab: &Vocabulary, what: &str) -> Result<()> {
    match tokens.iter().find(|&&t| !vocab.is_normal(t)) {
        Some(t) => Err(Error::input(format!("{what} contains non-normal token {t}"))),
        None => Ok(()),
    }
}

pub fn render_standard_example(inputs: &[TokenId], answer: TokenId, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    if inputs.is_empty() {
        return Err(Error::input("example needs at least one input token"));
    }
    check_normal(inputs, vocab, "inputs")?;
    check_normal(&[answer], vocab, "answer")?;
    Ok(render_unchecked(inputs, None, answer))
}

pub fn render_cot_example(inputs: &[TokenId], chain: &[TokenId], vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    if inputs.is_empty() {
        return Err(Error::input("example needs at least one input token"));
    }
    let (&answer, thoughts) = chain
        .split_last()
        .ok_or_else(|| Error::input("chain must have at least one token"))?;
    check_normal(inputs, vocab, "inputs")?;
    check_normal(chain, vocab, "chain")?;
    Ok(render_unchecked(inputs, Some(thoughts), answer))
}

fn render_unchecked(inputs: &[TokenId], thoughts: Option<&[TokenId]>, answer: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(inputs.len() + thoughts.map_or(0, |t| t.len() + 2) + 6);
    out.push(Special::InpStart.id());
    out.extend_from_slice(inputs);
    out.push(Special::InpEnd.id());
    if let Some(thoughts) = thoughts {
        out.push(Special::ThinkStart.id());
        out.extend_from_slice(thoughts);
        out.push(Special::ThinkEnd.id());
    }
    out.extend([Special::AnsStart.id(), answer, Special::AnsEnd.id(), Special::Eos.id()]);
    out
}

/// Renders an example and its loss mask.
pub fn render_masked(example: &Example, vocab: &Vocabulary) -> Result<(Vec<TokenId>, Vec<u8>)> {
    let tokens = if example.is_cot {
        render_cot_example(&example.inputs, &example.chain, vocab)?
    } else {
        let answer = *example
            .chain
            .last()
            .ok_or_else(|| Error::input("chain must have at least one token"))?;
        render_standard_example(&example.inputs, answer, vocab)?
    };
    let supervised_from = example.inputs.len() + 2;
    let mask = (0..tokens.len()).map(|i| (i >= supervised_from) as u8).collect();
    Ok((tokens, mask))
}

/// An example recovered from rendered tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedExample {
    pub inputs: Vec<TokenId>,
    /// Intermediate tokens when the example carries a thinking segment.
    pub thoughts: Option<Vec<TokenId>>,
    pub answer: TokenId,
    /// Token span `[start, end)` of the example in the parsed slice.
    pub span: (usize, usize),
}

impl ParsedExample {
    pub fn is_cot(&self) -> bool {
        self.thoughts.is_some()
    }

    pub fn render(&self) -> Vec<TokenId> {
        render_unchecked(&self.inputs, self.thoughts.as_deref(), self.answer)
    }
}

struct Cursor<'a> {
    tokens: &'a [TokenId],
    pos: usize,
}

impl Cursor<'_> {
    fn expect(&mut self, s: Special) -> Result<()> {
        match self.tokens.get(self.pos) {
            Some(&t) if t == s.id() => {
                self.pos += 1;
                Ok(())
            }
            other => Err(Error::Malformed(format!(
                "expected {} at position {}, found {:?}",
                s.name(),
                self.pos,
                other
            ))),
        }
    }

    fn normals_until(&mut self, end: Special, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        let start = self.pos;
        while let Some(&t) = self.tokens.get(self.pos) {
            if t == end.id() {
                return Ok(self.tokens[start..self.pos].to_vec());
            }
            if !vocab.is_normal(t) {
                return Err(Error::Malformed(format!(
                    "unexpected token {t} at position {} before {}",
                    self.pos,
                    end.name()
                )));
            }
            self.pos += 1;
        }
        Err(Error::Malformed(format!("missing {}", end.name())))
    }

    fn normal(&mut self, vocab: &Vocabulary) -> Result<TokenId> {
        match self.tokens.get(self.pos) {
            Some(&t) if vocab.is_normal(t) => {
                self.pos += 1;
                Ok(t)
            }
            other => Err(Error::Malformed(format!(
                "expected a normal token at position {}, found {:?}",
                self.pos, other
            ))),
        }
    }
}

/// Parses a run of complete examples (no leading `bos`).
pub fn parse_examples(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Vec<ParsedExample>> {
    let mut cur = Cursor { tokens, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < tokens.len() {
        let start = cur.pos;
        cur.expect(Special::InpStart)?;
        let inputs = cur.normals_until(Special::InpEnd, vocab)?;
        if inputs.is_empty() {
            return Err(Error::Malformed(format!("example at {start} has no inputs")));
        }
        cur.expect(Special::InpEnd)?;
        let thoughts = if tokens.get(cur.pos) == Some(&Special::ThinkStart.id()) {
            cur.pos += 1;
            let t = cur.normals_until(Special::ThinkEnd, vocab)?;
            cur.expect(Special::ThinkEnd)?;
            Some(t)
        } else {
            None
        };
        cur.expect(Special::AnsStart)?;
        let answer = cur.normal(vocab)?;
        cur.expect(Special::AnsEnd)?;
        cur.expect(Special::Eos)?;
        out.push(ParsedExample {
            inputs,
            thoughts,
            answer,
            span: (start, cur.pos),
        });
    }
    Ok(out)
}

/// Parses a full sequence; spans are relative to the slice after `bos`.
pub fn parse_sequence(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Vec<ParsedExample>> {
    match tokens.split_first() {
        Some((&first, rest)) if first == Special::Bos.id() => parse_examples(rest, vocab),
        _ => Err(Error::Malformed("sequence does not start with bos".into())),
    }
}

/// Shared state for generating sequences of one dataset.
#[derive(Debug, Clone)]
pub struct AbstractGenerator {
    config: DatasetConfig,
    vocab: Vocabulary,
    embedding: EmbeddingMatrix,
    cache: TokenProcessorCache,
}

impl AbstractGenerator {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.vocab_size)?;
        let embedding = EmbeddingMatrix::sample(&vocab, config.dim, config.embedding_seed())?;
        let cache = TokenProcessorCache::new(
            config.cache_size,
            config.dim,
            config.depth,
            config.slope,
            config.cache_seed(),
        )?;
        Ok(Self {
            config,
            vocab,
            embedding,
            cache,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.embedding
    }

    pub fn cache(&self) -> &TokenProcessorCache {
        &self.cache
    }

    /// Chain tokens for one example, following the DAG through the chosen
    /// processors.
    pub fn compute_chain(&self, inputs: &[TokenId], dag: &Dag, proc_ids: &[usize]) -> Result<Vec<TokenId>> {
        if dag.n_inputs != inputs.len() || proc_ids.len() != dag.n_chain {
            return Err(Error::input("inputs or processor ids do not match the dag"));
        }
        let mut nodes = inputs.to_vec();
        let mut parents = Vec::with_capacity(dag.fan_in);
        for (list, &pid) in dag.parents.iter().zip(proc_ids) {
            let mlp = self
                .cache
                .get(pid)
                .ok_or_else(|| Error::input(format!("processor index {pid} outside cache")))?;
            parents.clear();
            parents.extend(list.iter().map(|&i| nodes[i]));
            let y = chain_token(mlp, &self.embedding, &self.vocab, &parents)?;
            nodes.push(y);
        }
        Ok(nodes.split_off(inputs.len()))
    }

    pub fn generate_sequence(&self, j: u64) -> Result<Sequence> {
        let cfg = &self.config;
        let r_cot = cfg.recipe.r_cot(j, cfg.t)?;
        let seed = cfg.sequence_seed(j);
        let mut rng = SeqRng::from_seed(seed);

        let n = cfg.n_choices[rng.index(cfg.n_choices.len())];
        let m = cfg.m_choices[rng.index(cfg.m_choices.len())];
        let c = cfg.c_choices[rng.index(cfg.c_choices.len())];
        let dag = sample_dag(n, m, c, &mut rng)?;
        let proc_ids = self.cache.sample_processors(c, &mut rng);

        let mut tokens = vec![Special::Bos.id()];
        let mut loss_mask = vec![0u8];
        let mut cot_flags = Vec::with_capacity(cfg.k);
        let mut u_draws = Vec::with_capacity(cfg.k);
        let mut chains = Vec::with_capacity(cfg.k);
        for _ in 0..cfg.k {
            let inputs: Vec<TokenId> = (0..n).map(|_| self.vocab.sample_normal(&mut rng)).collect();
            let chain = self.compute_chain(&inputs, &dag, &proc_ids)?;
            let u = 1.0 - rng.uniform();
            let example = Example {
                inputs,
                chain,
                is_cot: r_cot >= u,
                uniform_draw: u,
            };
            let (t, mk) = render_masked(&example, &self.vocab)?;
            tokens.extend(t);
            loss_mask.extend(mk);
            cot_flags.push(example.is_cot);
            u_draws.push(u);
            chains.push(example.chain);
        }
        Ok(Sequence {
            seq_id: j,
            tokens,
            loss_mask,
            meta: SequenceMeta {
                n,
                m,
                c,
                k: cfg.k,
                r_cot,
                dag,
                proc_ids,
                cot_flags,
                seed,
                u_draws,
                chains,
            },
        })
    }

    /// Generates the given ids on `workers` threads, returned in input order.
    pub fn generate_many(&self, ids: &[u64], workers: usize) -> Result<Vec<Sequence>> {
        if workers <= 1 {
            return ids.iter().map(|&j| self.generate_sequence(j)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| ids.par_iter().map(|&j| self.generate_sequence(j)).collect())
    }

    /// All `T` sequences in output order, generated lazily.
    pub fn generate_dataset(&self) -> impl Iterator<Item = Result<Sequence>> + '_ {
        self.config
            .output_order()
            .into_iter()
            .map(move |j| self.generate_sequence(j))
    }

    /// Full consistency check of a sequence against this generator: layout,
    /// length, loss mask, metadata and chain recomputation.
    pub fn check_sequence(&self, seq: &Sequence) -> Result<()> {
        let bad = |msg: String| Err(Error::Malformed(format!("sequence {}: {msg}", seq.seq_id)));
        let meta = &seq.meta;
        if seq.tokens.len() != seq.loss_mask.len() {
            return bad("loss mask length differs from token length".into());
        }
        if let Err(v) = meta.dag.validate() {
            return bad(format!("invalid dag: {v}"));
        }
        if meta.cot_flags.len() != meta.k || meta.chains.len() != meta.k || meta.u_draws.len() != meta.k {
            return bad("metadata lengths disagree with K".into());
        }
        let parsed = parse_sequence(&seq.tokens, &self.vocab)?;
        if parsed.len() != meta.k {
            return bad(format!("parsed {} examples, expected {}", parsed.len(), meta.k));
        }
        if seq.loss_mask[0] != 0 {
            return bad("bos is supervised".into());
        }
        let (n, c) = (meta.n, meta.c);
        let mut expected_len = 1;
        for (i, ex) in parsed.iter().enumerate() {
            let is_cot = meta.cot_flags[i];
            if ex.is_cot() != is_cot || is_cot != (meta.r_cot >= meta.u_draws[i]) {
                return bad(format!("example {i} cot flag mismatch"));
            }
            let len = if is_cot { n + c + 7 } else { n + 6 };
            if ex.span.1 - ex.span.0 != len {
                return bad(format!("example {i} has length {}, expected {len}", ex.span.1 - ex.span.0));
            }
            expected_len += len;
            let mask = &seq.loss_mask[1 + ex.span.0..1 + ex.span.1];
            let ones = mask.iter().filter(|&&b| b == 1).count();
            let want = if is_cot { c + 5 } else { 4 };
            if ones != want || mask[..n + 2].iter().any(|&b| b != 0) || mask[n + 2..].iter().any(|&b| b != 1) {
                return bad(format!("example {i} loss mask wrong"));
            }
            let chain = self.compute_chain(&ex.inputs, &meta.dag, &meta.proc_ids)?;
            if chain != meta.chains[i] || chain.last() != Some(&ex.answer) {
                return bad(format!("example {i} chain does not recompute"));
            }
            if let Some(thoughts) = &ex.thoughts {
                if thoughts[..] != chain[..c - 1] {
                    return bad(format!("example {i} thinking tokens do not match chain"));
                }
            }
            let rerendered = ex.render();
            if rerendered[..] != seq.tokens[1 + ex.span.0..1 + ex.span.1] {
                return bad(format!("example {i} does not re-render identically"));
            }
        }
        if seq.tokens.len() != expected_len {
            return bad("total length mismatch".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::Alpha;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(64).unwrap()
    }

    fn small_config(recipe: Recipe) -> DatasetConfig {
        let mut cfg = DatasetConfig::simple(4, 4, 4, 8, 20, recipe, 7);
        cfg.vocab_size = 128;
        cfg.cache_size = 16;
        cfg
    }

    #[test]
    fn standard_example_layout() {
        let v = vocab();
        let t = render_standard_example(&[10, 11, 12, 13], 20, &v).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(t, vec![3, 10, 11, 12, 13, 4, 7, 20, 8, 2]);
        assert_eq!(render_standard_example(&[10], 20, &v).unwrap().len(), 7);
        assert!(render_standard_example(&[10, 2], 20, &v).is_err());
        assert!(render_standard_example(&[10], 1, &v).is_err());
        assert!(render_standard_example(&[], 20, &v).is_err());
    }

    #[test]
    fn cot_example_layout() {
        let v = vocab();
        let t = render_cot_example(&[10, 11, 12, 13], &[20, 21, 22, 23], &v).unwrap();
        assert_eq!(t.len(), 15);
        assert_eq!(t, vec![3, 10, 11, 12, 13, 4, 5, 20, 21, 22, 6, 7, 23, 8, 2]);
        let t = render_cot_example(&[10], &[30], &v).unwrap();
        assert_eq!(t, vec![3, 10, 4, 5, 6, 7, 30, 8, 2]);
        assert!(render_cot_example(&[10], &[], &v).is_err());
    }

    #[test]
    fn loss_masks() {
        let v = vocab();
        let ex = Example {
            inputs: vec![10, 11],
            chain: vec![20, 21, 22],
            is_cot: true,
            uniform_draw: 0.5,
        };
        let (t, m) = render_masked(&ex, &v).unwrap();
        assert_eq!(t.len(), 2 + 3 + 7);
        assert_eq!(m, vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        let std = Example { is_cot: false, ..ex };
        let (t, m) = render_masked(&std, &v).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(m, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn parse_rejects_garbage() {
        let v = vocab();
        assert!(parse_sequence(&[3, 10, 4, 7, 20, 8, 2], &v).is_err());
        assert!(parse_sequence(&[1, 3, 10, 4, 7, 20, 8], &v).is_err());
        assert!(parse_sequence(&[1, 3, 4, 7, 20, 8, 2], &v).is_err());
        assert!(parse_sequence(&[1, 3, 10, 4, 7, 20, 20, 8, 2], &v).is_err());
        assert_eq!(parse_sequence(&[1], &v).unwrap(), vec![]);
    }

    #[test]
    fn all_cot_and_all_standard_lengths() {
        let gen = AbstractGenerator::new(small_config(Recipe::all_cot())).unwrap();
        for j in 0..5 {
            let s = gen.generate_sequence(j).unwrap();
            assert!(s.meta.cot_flags.iter().all(|&f| f));
            assert_eq!(s.tokens.len(), 1 + 8 * (4 + 4 + 7));
            gen.check_sequence(&s).unwrap();
        }
        let gen = AbstractGenerator::new(small_config(Recipe::power(Alpha::Infinity))).unwrap();
        for j in 0..5 {
            let s = gen.generate_sequence(j).unwrap();
            assert!(s.meta.cot_flags.iter().all(|&f| !f));
            assert_eq!(s.tokens.len(), 1 + 8 * (4 + 6));
            gen.check_sequence(&s).unwrap();
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let gen = AbstractGenerator::new(small_config(Recipe::power(Alpha::Finite(1.0)))).unwrap();
        let a = gen.generate_sequence(13).unwrap();
        let b = gen.generate_sequence(13).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let gen2 = AbstractGenerator::new(small_config(Recipe::power(Alpha::Finite(1.0)))).unwrap();
        assert_eq!(gen2.generate_sequence(13).unwrap(), a);
    }

    #[test]
    fn single_and_parallel_agree() {
        let gen = AbstractGenerator::new(small_config(Recipe::power(Alpha::Finite(0.5)))).unwrap();
        let ids: Vec<u64> = (0..20).collect();
        let seq1 = gen.generate_many(&ids, 1).unwrap();
        let seq4 = gen.generate_many(&ids, 4).unwrap();
        assert_eq!(seq1, seq4);
        assert_eq!(gen.generate_sequence(11).unwrap(), seq1[11]);
    }

    #[test]
    fn single_sequence_dataset() {
        let mut cfg = small_config(Recipe::power(Alpha::Finite(1.0)));
        cfg.t = 1;
        let gen = AbstractGenerator::new(cfg).unwrap();
        let all: Vec<_> = gen.generate_dataset().collect::<Result<_>>().unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].meta.r_cot, 0.0);
    }

    #[test]
    fn shuffle_permutes_order_not_content() {
        let mut cfg = small_config(Recipe::power(Alpha::Finite(1.0)));
        cfg.shuffle = true;
        let gen = AbstractGenerator::new(cfg).unwrap();
        let order = gen.config().output_order();
        assert_ne!(order, (0..20).collect::<Vec<_>>());
        let shuffled: Vec<_> = gen.generate_dataset().collect::<Result<_>>().unwrap();
        for (pos, s) in shuffled.iter().enumerate() {
            assert_eq!(s.seq_id, order[pos]);
            assert_eq!(*s, gen.generate_sequence(s.seq_id).unwrap());
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_config(Recipe::all_cot());
        cfg.n_choices.clear();
        assert!(matches!(AbstractGenerator::new(cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = small_config(Recipe::all_cot());
        cfg.c_choices = vec![0];
        assert!(AbstractGenerator::new(cfg).is_err());
        let gen = AbstractGenerator::new(small_config(Recipe::all_cot())).unwrap();
        assert!(gen.generate_sequence(20).is_err());
    }

    #[test]
    fn check_catches_tampering() {
        let gen = AbstractGenerator::new(small_config(Recipe::power(Alpha::Finite(1.0)))).unwrap();
        let s = gen.generate_sequence(15).unwrap();
        gen.check_sequence(&s).unwrap();
        let mut bad = s.clone();
        let pos = bad.tokens.iter().position(|&t| t == Special::AnsStart.id()).unwrap();
        bad.tokens[pos + 1] = if bad.tokens[pos + 1] == 9 { 10 } else { 9 };
        assert!(gen.check_sequence(&bad).is_err());
        let mut bad = s.clone();
        bad.loss_mask[1] = 1;
        assert!(gen.check_sequence(&bad).is_err());
    }

    #[test]
    fn json_shape() {
        let gen = AbstractGenerator::new(small_config(Recipe::all_cot())).unwrap();
        let s = gen.generate_sequence(0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        for key in ["seq_id", "tokens", "loss_mask", "meta"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        for key in ["n", "m", "c", "k", "r_cot", "dag", "proc_ids", "cot_flags"] {
            assert!(v["meta"].get(key).is_some(), "{key}");
        }
        let back: Sequence = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn config_toml_with_defaults() {
        let cfg: DatasetConfig = toml::from_str(
            r#"
            n_choices = [3, 4]
            m_choices = [3, 4]
            c_choices = [3, 4]
            k = 40
            t = 100
            master_seed = 5
            [recipe]
            alpha = "inf"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.vocab_size, 1024);
        assert_eq!(cfg.dim, 10);
        assert_eq!(cfg.recipe.alpha, Alpha::Infinity);
        cfg.validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn parse_inverts_render(
            inputs in proptest::collection::vec(9u32..64, 1..8),
            chain in proptest::collection::vec(9u32..64, 1..8),
            cot: bool,
        ) {
            let v = vocab();
            let tokens = if cot {
                render_cot_example(&inputs, &chain, &v).unwrap()
            } else {
                render_standard_example(&inputs, *chain.last().unwrap(), &v).unwrap()
            };
            let parsed = parse_examples(&tokens, &v).unwrap();
            prop_assert_eq!(parsed.len(), 1);
            let ex = &parsed[0];
            prop_assert_eq!(&ex.inputs, &inputs);
            prop_assert_eq!(ex.answer, *chain.last().unwrap());
            if cot {
                prop_assert_eq!(ex.thoughts.as_deref(), Some(&chain[..chain.len() - 1]));
            } else {
                prop_assert!(ex.thoughts.is_none());
            }
            prop_assert_eq!(ex.render(), tokens);
        }

        #[test]
        fn generated_sequences_are_consistent(seed: u64, j in 0u64..20, alpha in 0.0f64..3.0) {
            let mut cfg = small_config(Recipe::power(Alpha::Finite(alpha)));
            cfg.master_seed = seed;
            cfg.n_choices = vec![1, 3, 5];
            cfg.m_choices = vec![1, 2, 4];
            cfg.c_choices = vec![1, 2, 5];
            let gen = AbstractGenerator::new(cfg).unwrap();
            let s = gen.generate_sequence(j).unwrap();
            prop_assert!(gen.check_sequence(&s).is_ok());
        }
    }
}
