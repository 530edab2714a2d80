//! String-symbolic datasets: random lowercase words, DAG-driven
//! slice-concat-shift transforms, chat-formatted prompts and text-side
//! answer extraction.
//!
//! Prompt `j` draws from its own stream keyed by `(master_seed, j)`: `N`,
//! `M`, `C`, the DAG, then per example the `N` words (character by
//! character) followed by the CoT coin `u` in `(0, 1]`.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dag::{sample_dag, Dag};
use crate::error::{Error, Result};
use crate::eval::{step_correctness, EvalRecord, EvalReport, ForcingStrategy};
use crate::recipe::Recipe;
use crate::rng::{derive_seed, domain, SeqRng};

const ALPHABET: u8 = 26;

/// Non-empty lowercase ASCII word.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Word(String);

impl Word {
    pub fn new(s: impl Into<String>) -> Result<Self> {
        let s = s.into();
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(Error::input(format!("{s:?} is not a lowercase word")));
        }
        Ok(Word(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<String> for Word {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Word::new(s)
    }
}

impl From<Word> for String {
    fn from(w: Word) -> String {
        w.0
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `W` letters, i.i.d. by default or all distinct when `distinct` is set.
pub fn random_word(len: usize, distinct: bool, rng: &mut SeqRng) -> Result<Word> {
    if len == 0 {
        return Err(Error::input("word length must be >= 1"));
    }
    let bytes: Vec<u8> = if distinct {
        if len > ALPHABET as usize {
            return Err(Error::input(format!("cannot draw {len} distinct letters")));
        }
        rng.choose_distinct(ALPHABET as usize, len)
            .into_iter()
            .map(|i| b'a' + i as u8)
            .collect()
    } else {
        (0..len).map(|_| b'a' + rng.below(ALPHABET as u64) as u8).collect()
    };
    Ok(Word(String::from_utf8(bytes).expect("ascii")))
}

/// Moves every letter `by` places forward, wrapping `z` to `a`.
pub fn shift_letters(s: &str, by: u8) -> String {
    s.bytes()
        .map(|b| (b'a' + (b - b'a' + by % ALPHABET) % ALPHABET) as char)
        .collect()
}

/// Concatenates the back half (from index `len/2`) of every parent and
/// shifts each letter forward by one.
pub fn string_transform(parents: &[Word]) -> Result<Word> {
    if parents.is_empty() {
        return Err(Error::input("string transform needs at least one parent"));
    }
    let joined: String = parents.iter().map(|w| &w.0[w.len() / 2..]).collect();
    Ok(Word(shift_letters(&joined, 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Substrings that would describe the hidden transform.
pub const LEAK_TERMS: [&str; 5] = ["slice", "half", "offset", "shift", "+1"];

/// First forbidden term found in a task description, if any.
pub fn find_leak(text: &str) -> Option<&'static str> {
    let lower = text.to_ascii_lowercase();
    LEAK_TERMS.into_iter().find(|t| lower.contains(t))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatTemplates {
    pub system_prompt: String,
    /// `{words}` is replaced with the comma-separated input words.
    pub question_template: String,
    /// Opens the reasoning part of an assistant turn; also the force-think
    /// suffix.
    pub think_open: String,
    /// Opens the final answer; also the force-answer suffix.
    pub answer_open: String,
}

impl Default for ChatTemplates {
    fn default() -> Self {
        Self {
            system_prompt: "You are a helpful assistant. Every question lists a few input words made of \
                lowercase letters. A hidden rule turns the input words into one output word, possibly \
                through intermediate words. Work out the rule from the solved examples and answer the \
                last question the same way. Write the final word inside \\boxed{}."
                .into(),
            question_template: "Input words: {words}".into(),
            think_open: "<|im_start|>think\n".into(),
            answer_open: "<|im_start|>final answer\n".into(),
        }
    }
}

impl ChatTemplates {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("system_prompt", &self.system_prompt),
            ("question_template", &self.question_template),
            ("think_open", &self.think_open),
            ("answer_open", &self.answer_open),
        ] {
            if v.is_empty() {
                return Err(Error::config(format!("template {name} is empty")));
            }
        }
        if !self.question_template.contains("{words}") {
            return Err(Error::config("question_template must contain {words}"));
        }
        for text in [&self.system_prompt, &self.question_template] {
            if let Some(term) = find_leak(text) {
                return Err(Error::config(format!(
                    "task description mentions {term:?}, which gives away the transform"
                )));
            }
        }
        Ok(())
    }

    pub fn question(&self, words: &[Word]) -> String {
        let joined = words.iter().map(Word::as_str).collect::<Vec<_>>().join(", ");
        self.question_template.replace("{words}", &joined)
    }

    /// Assistant turn. With `cot`, one `Step i: <word>` line per
    /// intermediate word precedes the answer.
    pub fn answer(&self, chain: &[Word], cot: bool) -> String {
        let (last, steps) = chain.split_last().expect("non-empty chain");
        let mut out = String::new();
        if cot {
            out.push_str(&self.think_open);
            for (i, w) in steps.iter().enumerate() {
                out.push_str(&format!("Step {}: {}\n", i + 1, w));
            }
        }
        out.push_str(&self.answer_open);
        out.push_str(&format!("\\boxed{{{last}}}"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangSymConfig {
    pub n_choices: Vec<usize>,
    pub m_choices: Vec<usize>,
    pub c_choices: Vec<usize>,
    pub k: usize,
    #[serde(default = "default_word_len")]
    pub word_len: usize,
    pub t: u64,
    pub recipe: Recipe,
    #[serde(default)]
    pub master_seed: u64,
    /// Draw letters of a word without replacement.
    #[serde(default)]
    pub distinct_letters: bool,
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
    #[serde(default)]
    pub templates: ChatTemplates,
}

fn default_word_len() -> usize {
    8
}

fn default_shard_size() -> usize {
    10_000
}

impl LangSymConfig {
    pub fn simple(n: usize, m: usize, c: usize, k: usize, t: u64, recipe: Recipe, seed: u64) -> Self {
        Self {
            n_choices: vec![n],
            m_choices: vec![m],
            c_choices: vec![c],
            k,
            word_len: default_word_len(),
            t,
            recipe,
            master_seed: seed,
            distinct_letters: false,
            shuffle: false,
            shard_size: default_shard_size(),
            templates: ChatTemplates::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [
            ("n_choices", &self.n_choices),
            ("m_choices", &self.m_choices),
            ("c_choices", &self.c_choices),
        ] {
            if set.is_empty() || set.contains(&0) {
                return Err(Error::config(format!("{name} must be non-empty with members >= 1")));
            }
        }
        if self.k == 0 || self.t == 0 || self.shard_size == 0 {
            return Err(Error::config("K, T and shard_size must be >= 1"));
        }
        if self.word_len < 2 {
            return Err(Error::config("word_len must be >= 2"));
        }
        if self.distinct_letters && self.word_len > ALPHABET as usize {
            return Err(Error::config("distinct letters need word_len <= 26"));
        }
        self.templates.validate()?;
        self.recipe.validate()
    }

    pub fn prompt_seed(&self, j: u64) -> u64 {
        derive_seed(self.master_seed, domain::LANGSYM, j)
    }

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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangSymMeta {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub w: usize,
    pub k: usize,
    pub r_cot: f64,
    pub dag: Dag,
    pub inputs: Vec<Vec<Word>>,
    pub chains: Vec<Vec<Word>>,
    pub cot_flags: Vec<bool>,
    pub u_draws: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub prompt_id: u64,
    pub messages: Vec<Message>,
    pub meta: LangSymMeta,
}

/// Chain words of one example.
pub fn compute_chain_words(inputs: &[Word], dag: &Dag) -> Result<Vec<Word>> {
    if inputs.len() != dag.n_inputs {
        return Err(Error::input("input count does not match the dag"));
    }
    let mut nodes = inputs.to_vec();
    for list in &dag.parents {
        let parents: Vec<Word> = list.iter().map(|&i| nodes[i].clone()).collect();
        nodes.push(string_transform(&parents)?);
    }
    Ok(nodes.split_off(inputs.len()))
}

pub fn generate_langsym_prompt(config: &LangSymConfig, j: u64) -> Result<ChatPrompt> {
    config.validate()?;
    let r_cot = config.recipe.r_cot(j, config.t)?;
    let seed = config.prompt_seed(j);
    let mut rng = SeqRng::from_seed(seed);
    let n = config.n_choices[rng.index(config.n_choices.len())];
    let m = config.m_choices[rng.index(config.m_choices.len())];
    let c = config.c_choices[rng.index(config.c_choices.len())];
    let dag = sample_dag(n, m, c, &mut rng)?;

    let tpl = &config.templates;
    let mut messages = vec![Message::new(Role::System, tpl.system_prompt.clone())];
    let mut meta = LangSymMeta {
        n,
        m,
        c,
        w: config.word_len,
        k: config.k,
        r_cot,
        dag,
        inputs: Vec::with_capacity(config.k),
        chains: Vec::with_capacity(config.k),
        cot_flags: Vec::with_capacity(config.k),
        u_draws: Vec::with_capacity(config.k),
        seed,
    };
    for _ in 0..config.k {
        let inputs = (0..n)
            .map(|_| random_word(config.word_len, config.distinct_letters, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let chain = compute_chain_words(&inputs, &meta.dag)?;
        let u = 1.0 - rng.uniform();
        let is_cot = r_cot >= u;
        messages.push(Message::new(Role::User, tpl.question(&inputs)));
        messages.push(Message::new(Role::Assistant, tpl.answer(&chain, is_cot)));
        meta.inputs.push(inputs);
        meta.chains.push(chain);
        meta.cot_flags.push(is_cot);
        meta.u_draws.push(u);
    }
    Ok(ChatPrompt {
        prompt_id: j,
        messages,
        meta,
    })
}

pub fn generate_langsym_many(config: &LangSymConfig, ids: &[u64], workers: usize) -> Result<Vec<ChatPrompt>> {
    config.validate()?;
    if workers <= 1 {
        return ids.iter().map(|&j| generate_langsym_prompt(config, j)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| ids.par_iter().map(|&j| generate_langsym_prompt(config, j)).collect())
}

/// All `T` prompts in output order, generated lazily.
pub fn generate_langsym_dataset(config: &LangSymConfig) -> impl Iterator<Item = Result<ChatPrompt>> + '_ {
    config
        .output_order()
        .into_iter()
        .map(move |j| generate_langsym_prompt(config, j))
}

fn boxed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\{([^{}]*)\}").unwrap())
}

fn step_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Step (\d+): ([a-z]+)").unwrap())
}

/// Contents of the first `\boxed{...}` holding a lowercase word; `None` is a
/// format failure.
pub fn extract_langsym_answer(text: &str) -> Option<Word> {
    boxed_re()
        .captures_iter(text)
        .find_map(|c| Word::new(&c[1]).ok())
}

/// `Step i: word` lines in order, stopping at the first gap in numbering.
pub fn extract_steps(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    for cap in step_re().captures_iter(text) {
        if cap[1].parse::<usize>().ok() != Some(out.len() + 1) {
            break;
        }
        out.push(Word(cap[2].to_string()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangSymEvalPrompt {
    pub prompt_id: u64,
    /// System message, `K-1` solved examples and the final question.
    pub messages: Vec<Message>,
    pub ground_truth_chain: Vec<Word>,
    #[serde(default)]
    pub stripped: Vec<usize>,
    pub meta: LangSymMeta,
}

pub fn make_langsym_eval_prompt(prompt: &ChatPrompt) -> Result<LangSymEvalPrompt> {
    if prompt.meta.k < 2 {
        return Err(Error::input("a prompt needs K >= 2"));
    }
    let mut messages = prompt.messages.clone();
    match messages.pop() {
        Some(Message {
            role: Role::Assistant,
            ..
        }) => {}
        _ => return Err(Error::Malformed("last message is not an assistant turn".into())),
    }
    Ok(LangSymEvalPrompt {
        prompt_id: prompt.prompt_id,
        messages,
        ground_truth_chain: prompt.meta.chains.last().cloned().unwrap_or_default(),
        stripped: Vec::new(),
        meta: prompt.meta.clone(),
    })
}

/// Rewrites `k_prime` CoT context answers as direct answers, chosen
/// uniformly without replacement.
pub fn strip_langsym(
    prompt: &LangSymEvalPrompt,
    k_prime: usize,
    templates: &ChatTemplates,
    rng: &mut SeqRng,
) -> Result<LangSymEvalPrompt> {
    let n_context = prompt.meta.k - 1;
    let cot: Vec<usize> = (0..n_context)
        .filter(|&i| !prompt.stripped.contains(&i) && prompt.meta.cot_flags[i])
        .collect();
    if k_prime > cot.len() {
        return Err(Error::input(format!(
            "cannot strip {k_prime} CoT examples from prompt {} with {}",
            prompt.prompt_id,
            cot.len()
        )));
    }
    let mut out = prompt.clone();
    for i in rng.choose_distinct(cot.len(), k_prime) {
        let ex = cot[i];
        // messages: [system, user_0, assistant_0, user_1, ...]
        out.messages[2 + 2 * ex].content = templates.answer(&prompt.meta.chains[ex], false);
        out.stripped.push(ex);
    }
    out.stripped.sort_unstable();
    Ok(out)
}

/// Chat model. Forced generation arrives as a trailing assistant message
/// holding the forced prefix; the reply continues it.
pub trait TextBackend {
    fn begin_prompt(&mut self, _prompt: &LangSymEvalPrompt) -> Result<()> {
        Ok(())
    }

    fn complete(&mut self, messages: &[Message]) -> Result<String>;
}

/// Replays the ground truth in the configured format.
#[derive(Debug)]
pub struct OracleTextBackend {
    templates: ChatTemplates,
    full: String,
    direct: String,
}

impl OracleTextBackend {
    pub fn new(templates: ChatTemplates) -> Self {
        Self {
            templates,
            full: String::new(),
            direct: String::new(),
        }
    }
}

impl TextBackend for OracleTextBackend {
    fn begin_prompt(&mut self, prompt: &LangSymEvalPrompt) -> Result<()> {
        if prompt.ground_truth_chain.is_empty() {
            return Err(Error::Malformed("empty ground-truth chain".into()));
        }
        self.full = self.templates.answer(&prompt.ground_truth_chain, true);
        self.direct = self.templates.answer(&prompt.ground_truth_chain, false);
        Ok(())
    }

    fn complete(&mut self, messages: &[Message]) -> Result<String> {
        let prefix = match messages.last() {
            Some(Message {
                role: Role::Assistant,
                content,
            }) => content.as_str(),
            _ => "",
        };
        for target in [&self.full, &self.direct] {
            if let Some(rest) = target.strip_prefix(prefix) {
                return Ok(rest.to_string());
            }
        }
        Ok(String::new())
    }
}

#[derive(Serialize)]
struct TextRequest<'a> {
    messages: &'a [Message],
}

#[derive(Deserialize)]
struct TextReply {
    completion: String,
}

/// JSON-lines chat protocol: `{"messages": [...]}` out, `{"completion": "..."}`
/// back.
pub struct StdioTextBackend<R, W> {
    reader: R,
    writer: W,
    line: String,
}

impl<R: BufRead, W: Write> StdioTextBackend<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            line: String::new(),
        }
    }
}

impl<R: BufRead, W: Write> TextBackend for StdioTextBackend<R, W> {
    fn complete(&mut self, messages: &[Message]) -> Result<String> {
        let io_err = |e: std::io::Error| Error::Malformed(format!("backend pipe: {e}"));
        let req = serde_json::to_string(&TextRequest { messages })?;
        writeln!(self.writer, "{req}").map_err(io_err)?;
        self.writer.flush().map_err(io_err)?;
        self.line.clear();
        if self.reader.read_line(&mut self.line).map_err(io_err)? == 0 {
            return Err(Error::Malformed("backend closed its output".into()));
        }
        let reply: TextReply = serde_json::from_str(self.line.trim())
            .map_err(|e| Error::Malformed(format!("bad backend reply: {e}")))?;
        Ok(reply.completion)
    }
}

pub struct ProcessTextBackend {
    child: Child,
    inner: StdioTextBackend<BufReader<ChildStdout>, BufWriter<ChildStdin>>,
}

impl ProcessTextBackend {
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
            inner: StdioTextBackend::new(BufReader::new(stdout), BufWriter::new(stdin)),
        })
    }
}

impl TextBackend for ProcessTextBackend {
    fn complete(&mut self, messages: &[Message]) -> Result<String> {
        self.inner.complete(messages)
    }
}

impl Drop for ProcessTextBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextForcing {
    pub strategy: ForcingStrategy,
    /// Character cap on the completion; `None` leaves it uncapped.
    pub budget: Option<usize>,
}

pub type LangSymRecord = EvalRecord<Word, String>;
pub type LangSymReport = EvalReport<Word, String>;

/// Forced prefix plus the backend's (capped) completion.
pub fn force_complete<B: TextBackend + ?Sized>(
    backend: &mut B,
    prompt: &LangSymEvalPrompt,
    forcing: &TextForcing,
    templates: &ChatTemplates,
) -> Result<String> {
    let wrap = |e: Error| Error::Backend {
        prompt_id: prompt.prompt_id,
        message: e.to_string(),
    };
    backend.begin_prompt(prompt).map_err(wrap)?;
    let forced = match forcing.strategy {
        ForcingStrategy::ForceThink => Some(templates.think_open.as_str()),
        ForcingStrategy::ForceAnswer => Some(templates.answer_open.as_str()),
        ForcingStrategy::NoForcing => None,
    };
    let mut messages = prompt.messages.clone();
    if let Some(f) = forced {
        messages.push(Message::new(Role::Assistant, f));
    }
    let mut completion = backend.complete(&messages).map_err(wrap)?;
    if let Some(cap) = forcing.budget {
        if let Some((idx, _)) = completion.char_indices().nth(cap) {
            completion.truncate(idx);
        }
    }
    Ok(format!("{}{}", forced.unwrap_or(""), completion))
}

pub fn evaluate_langsym<B: TextBackend + ?Sized>(
    backend: &mut B,
    prompts: &[LangSymEvalPrompt],
    forcing: &TextForcing,
    templates: &ChatTemplates,
) -> Result<LangSymReport> {
    if prompts.is_empty() {
        return Err(Error::input("no prompts to evaluate"));
    }
    if forcing.budget == Some(0) {
        return Err(Error::config("generation budget must be >= 1"));
    }
    let mut records = Vec::with_capacity(prompts.len());
    for p in prompts {
        let c = p.ground_truth_chain.len();
        let truth_steps = &p.ground_truth_chain[..c.saturating_sub(1)];
        let step_in_dag = p.meta.dag.steps_in_dag();
        let record = match force_complete(backend, p, forcing, templates) {
            Ok(text) => {
                let predicted = extract_langsym_answer(&text);
                let indicator = (predicted.as_ref() == p.ground_truth_chain.last()) as u8;
                LangSymRecord {
                    prompt_id: p.prompt_id,
                    format_failure: predicted.is_none(),
                    predicted_answer: predicted,
                    indicator,
                    step_correct: step_correctness(&extract_steps(&text), truth_steps),
                    step_in_dag,
                    generated: text,
                    error: None,
                }
            }
            Err(e @ Error::Backend { .. }) => LangSymRecord {
                prompt_id: p.prompt_id,
                predicted_answer: None,
                format_failure: true,
                indicator: 0,
                generated: String::new(),
                step_correct: vec![false; truth_steps.len()],
                step_in_dag,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    EvalReport::from_records(records, forcing.strategy, forcing.budget)
}
