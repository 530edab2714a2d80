//! Evaluation harness: prompts built from the first `K-1` examples plus a
//! query, CoT stripping, greedy generation under a forcing strategy, answer
//! extraction, and step-level breakdowns.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, SeqRng};
use crate::sequence::{parse_examples, parse_sequence, Sequence, SequenceMeta};
use crate::vocab::{Special, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub prompt_id: u64,
    /// `bos` followed by the `K-1` context examples.
    pub context_tokens: Vec<TokenId>,
    /// `inp_start x.. inp_end` of the held-out example.
    pub query_segment: Vec<TokenId>,
    pub ground_truth_chain: Vec<TokenId>,
    /// Context example indices converted from CoT to standard, ascending.
    #[serde(default)]
    pub stripped: Vec<usize>,
    pub meta: SequenceMeta,
}

impl EvalPrompt {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.context_tokens.clone();
        t.extend_from_slice(&self.query_segment);
        t
    }

    pub fn answer(&self) -> TokenId {
        *self.ground_truth_chain.last().expect("non-empty chain")
    }

    /// Per intermediate step: does the answer causally depend on it.
    pub fn steps_in_dag(&self) -> Vec<bool> {
        self.meta.dag.steps_in_dag()
    }
}

/// Turns a sequence into a prompt: the first `K-1` examples are context and
/// the last contributes only its input segment.
pub fn make_eval_prompt(seq: &Sequence, vocab: &Vocabulary) -> Result<EvalPrompt> {
    let examples = parse_sequence(&seq.tokens, vocab)?;
    if examples.len() < 2 {
        return Err(Error::input(format!(
            "sequence {} has {} examples; a prompt needs K >= 2",
            seq.seq_id,
            examples.len()
        )));
    }
    let last = examples.last().unwrap();
    let context_end = 1 + last.span.0;
    let mut query_segment = vec![Special::InpStart.id()];
    query_segment.extend_from_slice(&last.inputs);
    query_segment.push(Special::InpEnd.id());
    let ground_truth_chain = seq
        .meta
        .chains
        .last()
        .cloned()
        .ok_or_else(|| Error::Malformed("sequence metadata has no chains".into()))?;
    Ok(EvalPrompt {
        prompt_id: seq.seq_id,
        context_tokens: seq.tokens[..context_end].to_vec(),
        query_segment,
        ground_truth_chain,
        stripped: Vec::new(),
        meta: seq.meta.clone(),
    })
}

/// Strips `k_prime` CoT context examples chosen uniformly without
/// replacement.
pub fn strip_cot(prompt: &EvalPrompt, k_prime: usize, rng: &mut SeqRng, vocab: &Vocabulary) -> Result<EvalPrompt> {
    let examples = parse_examples(&prompt.context_tokens[1..], vocab)?;
    let cot: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].is_cot()).collect();
    if k_prime > cot.len() {
        return Err(Error::input(format!(
            "cannot strip {k_prime} CoT examples from prompt {} with {}",
            prompt.prompt_id,
            cot.len()
        )));
    }
    let selection: Vec<usize> = rng
        .choose_distinct(cot.len(), k_prime)
        .into_iter()
        .map(|i| cot[i])
        .collect();
    strip_selected(prompt, &selection, vocab)
}

/// Strips exactly the listed context examples. Non-CoT entries are left as
/// they are.
pub fn strip_selected(prompt: &EvalPrompt, selection: &[usize], vocab: &Vocabulary) -> Result<EvalPrompt> {
    if selection.is_empty() {
        return Ok(prompt.clone());
    }
    let mut examples = parse_examples(&prompt.context_tokens[1..], vocab)?;
    if let Some(&bad) = selection.iter().find(|&&i| i >= examples.len()) {
        return Err(Error::input(format!("context example {bad} does not exist")));
    }
    let mut stripped = prompt.stripped.clone();
    for &i in selection {
        if examples[i].thoughts.take().is_some() {
            stripped.push(i);
        }
    }
    stripped.sort_unstable();
    stripped.dedup();
    let mut context_tokens = vec![Special::Bos.id()];
    for ex in &examples {
        context_tokens.extend(ex.render());
    }
    Ok(EvalPrompt {
        context_tokens,
        stripped,
        ..prompt.clone()
    })
}

/// Per-prompt stream for stripping so prompts can be processed in any order.
pub fn strip_rng(seed: u64, prompt_id: u64) -> SeqRng {
    SeqRng::derived(seed, domain::STRIP, prompt_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingStrategy {
    ForceThink,
    ForceAnswer,
    NoForcing,
}

impl ForcingStrategy {
    pub fn forced_token(self) -> Option<TokenId> {
        match self {
            ForcingStrategy::ForceThink => Some(Special::ThinkStart.id()),
            ForcingStrategy::ForceAnswer => Some(Special::AnsStart.id()),
            ForcingStrategy::NoForcing => None,
        }
    }
}

impl std::str::FromStr for ForcingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "think" | "force_think" => Ok(ForcingStrategy::ForceThink),
            "answer" | "force_answer" => Ok(ForcingStrategy::ForceAnswer),
            "none" | "no_forcing" => Ok(ForcingStrategy::NoForcing),
            other => Err(Error::config(format!("unknown forcing strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcingConfig {
    pub strategy: ForcingStrategy,
    /// Maximum number of backend-generated tokens. `None` means `C + 6`
    /// for each prompt.
    pub budget: Option<usize>,
}

impl ForcingConfig {
    pub fn new(strategy: ForcingStrategy) -> Self {
        Self { strategy, budget: None }
    }

    pub fn with_budget(strategy: ForcingStrategy, budget: usize) -> Self {
        Self {
            strategy,
            budget: Some(budget),
        }
    }

    fn budget_for(&self, prompt: &EvalPrompt) -> Result<usize> {
        match self.budget {
            Some(0) => Err(Error::config("generation budget must be >= 1")),
            Some(b) => Ok(b),
            None => Ok(prompt.ground_truth_chain.len() + 6),
        }
    }
}

/// Greedy next-token model. The harness resends the full prefix each step.
pub trait GenerationBackend {
    /// Called once before generation for each prompt.
    fn begin_prompt(&mut self, _prompt: &EvalPrompt) -> Result<()> {
        Ok(())
    }

    fn next_token(&mut self, prefix: &[TokenId]) -> Result<TokenId>;
}

/// Canonical continuations after a query: full CoT tail and direct answer.
fn canonical_tails(thoughts: &[TokenId], answer: TokenId) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut cot = vec![Special::ThinkStart.id()];
    cot.extend_from_slice(thoughts);
    cot.push(Special::ThinkEnd.id());
    let direct = vec![
        Special::AnsStart.id(),
        answer,
        Special::AnsEnd.id(),
        Special::Eos.id(),
    ];
    cot.extend_from_slice(&direct);
    (cot, direct)
}

/// Continues whichever canonical tail the generated suffix is a prefix of;
/// emits `eos` otherwise.
fn continue_tail(generated: &[TokenId], tails: &(Vec<TokenId>, Vec<TokenId>)) -> TokenId {
    for tail in [&tails.0, &tails.1] {
        if generated.len() < tail.len() && tail.starts_with(generated) {
            return tail[generated.len()];
        }
    }
    Special::Eos.id()
}

/// Replays the ground-truth chain in the canonical format.
#[derive(Debug, Default)]
pub struct OracleBackend {
    prompt_len: usize,
    tails: (Vec<TokenId>, Vec<TokenId>),
}

impl OracleBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl GenerationBackend for OracleBackend {
    fn begin_prompt(&mut self, prompt: &EvalPrompt) -> Result<()> {
        let (answer, thoughts) = prompt
            .ground_truth_chain
            .split_last()
            .ok_or_else(|| Error::Malformed("empty ground-truth chain".into()))?;
        self.prompt_len = prompt.context_tokens.len() + prompt.query_segment.len();
        self.tails = canonical_tails(thoughts, *answer);
        Ok(())
    }

    fn next_token(&mut self, prefix: &[TokenId]) -> Result<TokenId> {
        let generated = prefix.get(self.prompt_len..).unwrap_or(&[]);
        Ok(continue_tail(generated, &self.tails))
    }
}

/// Follows the output format but fills every chain position with a uniform
/// normal token. Reseeded per prompt from `(seed, prompt_id)`.
#[derive(Debug)]
pub struct RandomBackend {
    seed: u64,
    vocab: Vocabulary,
    prompt_len: usize,
    tails: (Vec<TokenId>, Vec<TokenId>),
}

impl RandomBackend {
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        Self {
            seed,
            vocab,
            prompt_len: 0,
            tails: Default::default(),
        }
    }
}

impl GenerationBackend for RandomBackend {
    fn begin_prompt(&mut self, prompt: &EvalPrompt) -> Result<()> {
        let mut rng = SeqRng::derived(self.seed, domain::RANDOM_BACKEND, prompt.prompt_id);
        let c = prompt.ground_truth_chain.len().max(1);
        let chain: Vec<TokenId> = (0..c).map(|_| self.vocab.sample_normal(&mut rng)).collect();
        self.prompt_len = prompt.context_tokens.len() + prompt.query_segment.len();
        self.tails = canonical_tails(&chain[..c - 1], chain[c - 1]);
        Ok(())
    }

    fn next_token(&mut self, prefix: &[TokenId]) -> Result<TokenId> {
        let generated = prefix.get(self.prompt_len..).unwrap_or(&[]);
        Ok(continue_tail(generated, &self.tails))
    }
}

#[derive(Serialize)]
struct StdioRequest<'a> {
    tokens: &'a [TokenId],
}

#[derive(Deserialize)]
struct StdioReply {
    next: TokenId,
}

/// JSON-lines protocol over any reader/writer pair: one `{"tokens": [...]}`
/// line out, one `{"next": id}` line back.
pub struct StdioBackend<R, W> {
    reader: R,
    writer: W,
    line: String,
}

impl<R: BufRead, W: Write> StdioBackend<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            line: String::new(),
        }
    }
}

impl<R: BufRead, W: Write> GenerationBackend for StdioBackend<R, W> {
    fn next_token(&mut self, prefix: &[TokenId]) -> Result<TokenId> {
        let req = serde_json::to_string(&StdioRequest { tokens: prefix })?;
        let io_err = |e: std::io::Error| Error::Malformed(format!("backend pipe: {e}"));
        writeln!(self.writer, "{req}").map_err(io_err)?;
        self.writer.flush().map_err(io_err)?;
        self.line.clear();
        if self.reader.read_line(&mut self.line).map_err(io_err)? == 0 {
            return Err(Error::Malformed("backend closed its output".into()));
        }
        let reply: StdioReply = serde_json::from_str(self.line.trim())
            .map_err(|e| Error::Malformed(format!("bad backend reply {:?}: {e}", self.line.trim())))?;
        Ok(reply.next)
    }
}

/// A child process speaking the stdio protocol.
pub struct ProcessBackend {
    child: Child,
    inner: StdioBackend<BufReader<ChildStdout>, BufWriter<ChildStdin>>,
}

impl ProcessBackend {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(command, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            child,
            inner: StdioBackend::new(BufReader::new(stdout), BufWriter::new(stdin)),
        })
    }
}

impl GenerationBackend for ProcessBackend {
    fn next_token(&mut self, prefix: &[TokenId]) -> Result<TokenId> {
        self.inner.next_token(prefix)
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Appends the forced token (if any) to the prompt and decodes greedily
/// until `eos` or the budget runs out. The returned tokens include the
/// forced token.
pub fn force_generate<B: GenerationBackend + ?Sized>(
    backend: &mut B,
    prompt: &EvalPrompt,
    forcing: &ForcingConfig,
) -> Result<Vec<TokenId>> {
    let budget = forcing.budget_for(prompt)?;
    let wrap = |e: Error| Error::Backend {
        prompt_id: prompt.prompt_id,
        message: e.to_string(),
    };
    backend.begin_prompt(prompt).map_err(wrap)?;
    let mut prefix = prompt.tokens();
    let start = prefix.len();
    if let Some(t) = forcing.strategy.forced_token() {
        prefix.push(t);
    }
    for _ in 0..budget {
        let next = backend.next_token(&prefix).map_err(wrap)?;
        prefix.push(next);
        if next == Special::Eos.id() {
            break;
        }
    }
    Ok(prefix.split_off(start))
}

/// First `ans_start, y, ans_end` triple; `None` is a format failure.
pub fn extract_answer(generated: &[TokenId]) -> Option<TokenId> {
    generated
        .windows(3)
        .find(|w| w[0] == Special::AnsStart.id() && w[2] == Special::AnsEnd.id())
        .map(|w| w[1])
}

/// Tokens after the first `think_start`, up to `think_end`, `ans_start`,
/// `eos` or the end of output.
pub fn extract_thoughts(generated: &[TokenId]) -> Vec<TokenId> {
    let Some(start) = generated.iter().position(|&t| t == Special::ThinkStart.id()) else {
        return Vec::new();
    };
    let stops = [Special::ThinkEnd.id(), Special::AnsStart.id(), Special::Eos.id()];
    generated[start + 1..]
        .iter()
        .take_while(|t| !stops.contains(t))
        .copied()
        .collect()
}

/// Positional step alignment: step `i` is correct iff the `i`-th generated
/// thought equals the `i`-th ground-truth intermediate.
pub fn step_correctness<T: PartialEq>(generated: &[T], truth: &[T]) -> Vec<bool> {
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| generated.get(i) == Some(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord<A, G> {
    pub prompt_id: u64,
    pub predicted_answer: Option<A>,
    pub format_failure: bool,
    pub indicator: u8,
    pub generated: G,
    pub step_correct: Vec<bool>,
    pub step_in_dag: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Abstract-token record: answers are token ids, output is a token list.
pub type TokenRecord = EvalRecord<TokenId, Vec<TokenId>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionTable {
    pub in_dag_correct: u64,
    pub in_dag_incorrect: u64,
    pub not_in_dag_correct: u64,
    pub not_in_dag_incorrect: u64,
    /// Prompts with no data for this step.
    pub missing: u64,
}

impl InclusionTable {
    pub fn total(&self) -> u64 {
        self.in_dag_correct + self.in_dag_incorrect + self.not_in_dag_correct + self.not_in_dag_incorrect + self.missing
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDagTables {
    /// 1-based step number.
    pub step: usize,
    pub correct_answer: InclusionTable,
    pub wrong_answer: InclusionTable,
}

/// `[first step correct?][second step correct?]` counts, index 0 = correct.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    pub counts: [[u64; 2]; 2],
    pub missing: u64,
}

impl StepGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.missing
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPairTables {
    pub steps: (usize, usize),
    pub correct_answer: StepGrid,
    pub wrong_answer: StepGrid,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub n_correct: u64,
    pub n_wrong: u64,
    pub dag_inclusion: Vec<StepDagTables>,
    /// Step 1 × step 2 grid, when prompts have at least two intermediates.
    pub step_pair: Option<StepPairTables>,
}

/// Cross-tabulates step correctness against DAG inclusion, split by
/// final-answer correctness.
pub fn step_dag_breakdown<A, G>(records: &[EvalRecord<A, G>]) -> Breakdown {
    let max_steps = records.iter().map(|r| r.step_correct.len()).max().unwrap_or(0);
    let mut out = Breakdown {
        n_correct: records.iter().filter(|r| r.indicator == 1).count() as u64,
        n_wrong: records.iter().filter(|r| r.indicator == 0).count() as u64,
        ..Default::default()
    };
    for s in 0..max_steps {
        let mut tables = StepDagTables {
            step: s + 1,
            ..Default::default()
        };
        for r in records {
            let t = if r.indicator == 1 {
                &mut tables.correct_answer
            } else {
                &mut tables.wrong_answer
            };
            match (r.step_correct.get(s), r.step_in_dag.get(s)) {
                (Some(true), Some(true)) => t.in_dag_correct += 1,
                (Some(false), Some(true)) => t.in_dag_incorrect += 1,
                (Some(true), Some(false)) => t.not_in_dag_correct += 1,
                (Some(false), Some(false)) => t.not_in_dag_incorrect += 1,
                _ => t.missing += 1,
            }
        }
        out.dag_inclusion.push(tables);
    }
    if max_steps >= 2 {
        let mut pair = StepPairTables {
            steps: (1, 2),
            ..Default::default()
        };
        for r in records {
            let g = if r.indicator == 1 {
                &mut pair.correct_answer
            } else {
                &mut pair.wrong_answer
            };
            match (r.step_correct.first(), r.step_correct.get(1)) {
                (Some(&a), Some(&b)) => g.counts[!a as usize][!b as usize] += 1,
                _ => g.missing += 1,
            }
        }
        out.step_pair = Some(pair);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<A, G> {
    pub strategy: ForcingStrategy,
    pub budget: Option<usize>,
    pub n_prompts: u64,
    pub n_correct: u64,
    pub n_format_failure: u64,
    pub n_backend_errors: u64,
    pub accuracy: f64,
    pub records: Vec<EvalRecord<A, G>>,
    pub breakdown: Breakdown,
}

pub type TokenReport = EvalReport<TokenId, Vec<TokenId>>;

impl<A, G> EvalReport<A, G> {
    pub(crate) fn from_records(
        records: Vec<EvalRecord<A, G>>,
        strategy: ForcingStrategy,
        budget: Option<usize>,
    ) -> Result<Self> {
        let n = records.len() as u64;
        let errors = records.iter().filter(|r| r.error.is_some()).count() as u64;
        if n > 0 && errors == n {
            return Err(Error::Backend {
                prompt_id: records[0].prompt_id,
                message: format!(
                    "all {n} prompts failed; first error: {}",
                    records[0].error.as_deref().unwrap_or("")
                ),
            });
        }
        let n_correct = records.iter().map(|r| r.indicator as u64).sum();
        let breakdown = step_dag_breakdown(&records);
        Ok(Self {
            strategy,
            budget,
            n_prompts: n,
            n_correct,
            n_format_failure: records.iter().filter(|r| r.format_failure).count() as u64,
            n_backend_errors: errors,
            accuracy: n_correct as f64 / n as f64,
            records,
            breakdown,
        })
    }
}

/// Runs every prompt in order and scores it.
pub fn evaluate<B: GenerationBackend + ?Sized>(
    backend: &mut B,
    prompts: &[EvalPrompt],
    forcing: &ForcingConfig,
) -> Result<TokenReport> {
    if prompts.is_empty() {
        return Err(Error::input("no prompts to evaluate"));
    }
    let mut records = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let c = prompt.ground_truth_chain.len();
        let step_in_dag = prompt.steps_in_dag();
        let record = match force_generate(backend, prompt, forcing) {
            Ok(generated) => {
                let predicted = extract_answer(&generated);
                let thoughts = extract_thoughts(&generated);
                EvalRecord {
                    prompt_id: prompt.prompt_id,
                    predicted_answer: predicted,
                    format_failure: predicted.is_none(),
                    indicator: (predicted == Some(prompt.answer())) as u8,
                    step_correct: step_correctness(&thoughts, &prompt.ground_truth_chain[..c - 1]),
                    step_in_dag,
                    generated,
                    error: None,
                }
            }
            Err(e @ Error::Backend { .. }) => EvalRecord {
                prompt_id: prompt.prompt_id,
                predicted_answer: None,
                format_failure: true,
                indicator: 0,
                generated: Vec::new(),
                step_correct: vec![false; c - 1],
                step_in_dag,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    EvalReport::from_records(records, forcing.strategy, forcing.budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::{Alpha, Recipe};
    use crate::sequence::{AbstractGenerator, DatasetConfig};

    fn generator(k: usize, recipe: Recipe) -> AbstractGenerator {
        let mut cfg = DatasetConfig::simple(4, 2, 3, k, 50, recipe, 3);
        cfg.vocab_size = 256;
        cfg.cache_size = 32;
        AbstractGenerator::new(cfg).unwrap()
    }

    fn prompts(gen: &AbstractGenerator, n: u64) -> Vec<EvalPrompt> {
        (0..n)
            .map(|j| make_eval_prompt(&gen.generate_sequence(j).unwrap(), gen.vocab()).unwrap())
            .collect()
    }

    #[test]
    fn prompt_structure() {
        let gen = generator(6, Recipe::all_cot());
        let seq = gen.generate_sequence(0).unwrap();
        let p = make_eval_prompt(&seq, gen.vocab()).unwrap();
        let eos = p.context_tokens.iter().filter(|&&t| t == Special::Eos.id()).count();
        assert_eq!(eos, 5);
        assert_eq!(p.query_segment.len(), 4 + 2);
        assert_eq!(p.query_segment[0], Special::InpStart.id());
        let parsed = parse_sequence(&seq.tokens, gen.vocab()).unwrap();
        assert_eq!(p.query_segment[1..5], parsed[5].inputs[..]);
        // Ground truth recomputes from the metadata.
        let chain = gen
            .compute_chain(&parsed[5].inputs, &seq.meta.dag, &seq.meta.proc_ids)
            .unwrap();
        assert_eq!(chain, p.ground_truth_chain);
    }

    #[test]
    fn minimal_and_too_short_prompts() {
        let gen = generator(2, Recipe::all_cot());
        let p = make_eval_prompt(&gen.generate_sequence(0).unwrap(), gen.vocab()).unwrap();
        assert_eq!(parse_examples(&p.context_tokens[1..], gen.vocab()).unwrap().len(), 1);
        let gen = generator(1, Recipe::all_cot());
        assert!(make_eval_prompt(&gen.generate_sequence(0).unwrap(), gen.vocab()).is_err());
    }

    #[test]
    fn stripping() {
        let gen = generator(10, Recipe::all_cot());
        let p = &prompts(&gen, 1)[0];
        let v = gen.vocab();
        let same = strip_cot(p, 0, &mut SeqRng::from_seed(1), v).unwrap();
        assert_eq!(serde_json::to_string(&same).unwrap(), serde_json::to_string(p).unwrap());

        let s = strip_cot(p, 4, &mut SeqRng::from_seed(1), v).unwrap();
        assert_eq!(s.stripped.len(), 4);
        assert_eq!(p.context_tokens.len() - s.context_tokens.len(), 4 * (3 + 1));
        assert_eq!(s.query_segment, p.query_segment);
        let again = strip_selected(&s, &s.stripped, v).unwrap();
        assert_eq!(again, s);

        let all = strip_cot(p, 9, &mut SeqRng::from_seed(2), v).unwrap();
        let ex = parse_examples(&all.context_tokens[1..], v).unwrap();
        assert!(ex.iter().all(|e| !e.is_cot()));
        assert!(matches!(
            strip_cot(p, 10, &mut SeqRng::from_seed(2), v),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn oracle_force_think_tail() {
        let gen = generator(4, Recipe::all_cot());
        let p = &prompts(&gen, 1)[0];
        let y = &p.ground_truth_chain;
        let out = force_generate(
            &mut OracleBackend::new(),
            p,
            &ForcingConfig::new(ForcingStrategy::ForceThink),
        )
        .unwrap();
        let expected = vec![5, y[0], y[1], 6, 7, y[2], 8, 2];
        assert_eq!(out, expected);

        let out = force_generate(
            &mut OracleBackend::new(),
            p,
            &ForcingConfig::new(ForcingStrategy::ForceAnswer),
        )
        .unwrap();
        assert_eq!(out, vec![7, y[2], 8, 2]);

        let out = force_generate(
            &mut OracleBackend::new(),
            p,
            &ForcingConfig::with_budget(ForcingStrategy::NoForcing, 1),
        )
        .unwrap();
        assert_eq!(out, vec![5]);
        assert!(force_generate(
            &mut OracleBackend::new(),
            p,
            &ForcingConfig::with_budget(ForcingStrategy::NoForcing, 0)
        )
        .is_err());
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer(&[5, 17, 23, 6, 7, 42, 8, 2]), Some(42));
        assert_eq!(extract_answer(&[7, 42]), None);
        assert_eq!(extract_answer(&[7, 42, 8, 7, 43, 8]), Some(42));
        assert_eq!(extract_answer(&[]), None);
        assert_eq!(extract_thoughts(&[5, 17, 23, 6, 7, 42, 8, 2]), vec![17, 23]);
        assert_eq!(extract_thoughts(&[5, 17]), vec![17]);
        assert_eq!(extract_thoughts(&[7, 42, 8]), Vec::<TokenId>::new());
    }

    #[test]
    fn positional_step_alignment() {
        assert_eq!(step_correctness(&[1, 2], &[1, 2]), vec![true, true]);
        assert_eq!(step_correctness(&[1], &[1, 2]), vec![true, false]);
        assert_eq!(step_correctness(&[9, 2, 3], &[1, 2]), vec![false, true]);
        assert_eq!(step_correctness::<u32>(&[], &[]), Vec::<bool>::new());
    }

    #[test]
    fn oracle_scores_perfectly() {
        let gen = generator(5, Recipe::all_cot());
        let ps = prompts(&gen, 20);
        for strategy in [
            ForcingStrategy::ForceThink,
            ForcingStrategy::ForceAnswer,
            ForcingStrategy::NoForcing,
        ] {
            let rep = evaluate(&mut OracleBackend::new(), &ps, &ForcingConfig::new(strategy)).unwrap();
            assert_eq!(rep.accuracy, 1.0);
            assert_eq!(rep.n_format_failure, 0);
            let b = &rep.breakdown;
            assert_eq!(b.n_correct, 20);
            for t in &b.dag_inclusion {
                assert_eq!(t.correct_answer.total(), 20);
                assert_eq!(t.wrong_answer.total(), 0);
            }
            let pair = b.step_pair.unwrap();
            assert_eq!(pair.correct_answer.total(), 20);
            if strategy == ForcingStrategy::ForceAnswer {
                assert_eq!(pair.correct_answer.counts[1][1], 20);
            } else {
                assert_eq!(pair.correct_answer.counts[0][0], 20);
            }
        }
    }

    #[test]
    fn random_backend_keeps_format() {
        let gen = generator(3, Recipe::power(Alpha::Finite(1.0)));
        let ps = prompts(&gen, 30);
        let mut backend = RandomBackend::new(*gen.vocab(), 1);
        let rep = evaluate(&mut backend, &ps, &ForcingConfig::new(ForcingStrategy::ForceThink)).unwrap();
        assert_eq!(rep.n_format_failure, 0);
        assert!(rep.accuracy < 0.5);
    }

    struct Failing;

    impl GenerationBackend for Failing {
        fn next_token(&mut self, _prefix: &[TokenId]) -> Result<TokenId> {
            Err(Error::Malformed("boom".into()))
        }
    }

    struct FailsOnOdd(OracleBackend, u64);

    impl GenerationBackend for FailsOnOdd {
        fn begin_prompt(&mut self, prompt: &EvalPrompt) -> Result<()> {
            self.1 = prompt.prompt_id;
            self.0.begin_prompt(prompt)
        }

        fn next_token(&mut self, prefix: &[TokenId]) -> Result<TokenId> {
            if self.1 % 2 == 1 {
                return Err(Error::Malformed("odd".into()));
            }
            self.0.next_token(prefix)
        }
    }

    #[test]
    fn backend_failures_are_aggregated() {
        let gen = generator(3, Recipe::all_cot());
        let ps = prompts(&gen, 6);
        let forcing = ForcingConfig::new(ForcingStrategy::ForceThink);
        assert!(matches!(
            evaluate(&mut Failing, &ps, &forcing),
            Err(Error::Backend { .. })
        ));
        let rep = evaluate(&mut FailsOnOdd(OracleBackend::new(), 0), &ps, &forcing).unwrap();
        assert_eq!(rep.n_backend_errors, 3);
        assert_eq!(rep.accuracy, 0.5);
        assert!(evaluate(&mut OracleBackend::new(), &[], &forcing).is_err());
    }

    #[test]
    fn stdio_protocol_over_buffers() {
        let replies = b"{\"next\": 7}\n{\"next\": 42}\n";
        let mut sent = Vec::new();
        {
            let mut b = StdioBackend::new(&replies[..], &mut sent);
            assert_eq!(b.next_token(&[1, 3]).unwrap(), 7);
            assert_eq!(b.next_token(&[1, 3, 7]).unwrap(), 42);
            assert!(b.next_token(&[1]).is_err());
        }
        let text = String::from_utf8(sent).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], r#"{"tokens":[1,3]}"#);
        assert_eq!(lines[1], r#"{"tokens":[1,3,7]}"#);
    }

    #[test]
    fn breakdown_margins_with_gaps() {
        let mk = |ind: u8, steps: Vec<bool>, dag: Vec<bool>| TokenRecord {
            prompt_id: 0,
            predicted_answer: None,
            format_failure: false,
            indicator: ind,
            generated: vec![],
            step_correct: steps,
            step_in_dag: dag,
            error: None,
        };
        let recs = vec![
            mk(1, vec![true, false], vec![true, true]),
            mk(0, vec![false, false], vec![false, true]),
            mk(0, vec![true], vec![true]),
        ];
        let b = step_dag_breakdown(&recs);
        assert_eq!(b.dag_inclusion.len(), 2);
        assert_eq!(b.dag_inclusion[0].correct_answer.in_dag_correct, 1);
        assert_eq!(b.dag_inclusion[0].wrong_answer.not_in_dag_incorrect, 1);
        assert_eq!(b.dag_inclusion[1].wrong_answer.missing, 1);
        for t in &b.dag_inclusion {
            assert_eq!(t.correct_answer.total(), 1);
            assert_eq!(t.wrong_answer.total(), 2);
        }
        let pair = b.step_pair.unwrap();
        assert_eq!(pair.correct_answer.counts[0][1], 1);
        assert_eq!(pair.wrong_answer.counts[1][1], 1);
        assert_eq!(pair.wrong_answer.missing, 1);
    }
}
