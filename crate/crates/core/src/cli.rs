//! The `cotlab` command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{
    evaluate, make_eval_prompt, strip_cot, strip_rng, Breakdown, EvalPrompt, ForcingConfig, ForcingStrategy,
    GenerationBackend, OracleBackend, ProcessBackend, RandomBackend,
};
use crate::langsym::{
    evaluate_langsym, make_langsym_eval_prompt, strip_langsym, ChatPrompt, ChatTemplates, LangSymConfig,
    LangSymEvalPrompt, OracleTextBackend, ProcessTextBackend, TextBackend, TextForcing,
};
use crate::manifest::{read_records, verify, write_dataset, write_records, DatasetSpec, RunManifest, VerifyOptions};
use crate::recipe::{expected_tokens, Alpha, BudgetReport, Recipe};
use crate::sequence::{DatasetConfig, Sequence};
use crate::vocab::{Special, TokenId, Vocabulary};

#[derive(Debug, Parser)]
#[command(name = "cotlab", version, about = "Synthetic chain-of-thought datasets, evaluation and token budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an abstract-token dataset.
    GenAbstract(GenArgs),
    /// Generate a string-symbolic chat dataset.
    GenLangsym(GenArgs),
    /// Turn sequences into eval prompts, stripping K' CoT context examples.
    StripCot(StripArgs),
    /// Evaluate abstract-token prompts against a backend.
    Eval(EvalArgs),
    /// Evaluate chat prompts against a text backend.
    EvalLangsym(EvalLangsymArgs),
    /// Expected CoT examples and training tokens for a mixing schedule.
    Budget(BudgetArgs),
    /// Pretty-print one record with its delimiters annotated.
    Inspect(InspectArgs),
    /// Re-hash outputs and regenerate shards from a manifest.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// TOML config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    c: Vec<usize>,
    #[arg(long)]
    alpha: Option<Alpha>,
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    shard_size: Option<usize>,
    /// Abstract only.
    #[arg(long)]
    vocab_size: Option<u32>,
    /// Abstract only.
    #[arg(long)]
    dim: Option<usize>,
    /// LangSym only.
    #[arg(long)]
    word_len: Option<usize>,
}

#[derive(Debug, Args)]
struct StripArgs {
    /// Dataset directory or JSON-lines file of sequences, eval prompts or
    /// chat prompts.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    k_prime: usize,
    #[arg(long)]
    seed: u64,
    /// JSON-lines output file.
    #[arg(long)]
    out: PathBuf,
    /// LangSym config supplying the chat templates.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TokenBackendKind {
    Oracle,
    Random,
    Stdio,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    backend: TokenBackendKind,
    /// Shell command for the stdio backend.
    #[arg(long)]
    backend_cmd: Option<String>,
    #[arg(long, default_value = "think")]
    strategy: ForcingStrategy,
    /// Backend tokens per prompt; defaults to C+6.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Seed for the random backend.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vocabulary size when the prompts do not come with a manifest.
    #[arg(long)]
    vocab_size: Option<u32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TextBackendKind {
    Oracle,
    StdioText,
}

#[derive(Debug, Args)]
struct EvalLangsymArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    backend: TextBackendKind,
    #[arg(long)]
    backend_cmd: Option<String>,
    #[arg(long, default_value = "think")]
    strategy: ForcingStrategy,
    /// Character cap on each completion.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// LangSym config supplying the chat templates.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    #[arg(long)]
    alpha: Alpha,
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 0.0)]
    b: f64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    c: u64,
    #[arg(long)]
    k: u64,
    #[arg(long)]
    t: u64,
    /// Also report the token ratio against this exponent.
    #[arg(long)]
    baseline_alpha: Option<Alpha>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Position of the record in the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Select by sequence/prompt id instead of position.
    #[arg(long)]
    id: Option<u64>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Dataset directory containing manifest.json.
    dir: PathBuf,
    /// Regenerate only this many randomly chosen shards.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenAbstract(a) => gen(a, false),
        Command::GenLangsym(a) => gen(a, true),
        Command::StripCot(a) => strip(a),
        Command::Eval(a) => eval_tokens(a),
        Command::EvalLangsym(a) => eval_text(a),
        Command::Budget(a) => budget(a),
        Command::Inspect(a) => inspect(a),
        Command::Verify(a) => {
            let opts = VerifyOptions {
                sample: a.sample,
                workers: a.workers,
                seed: a.seed,
            };
            let report = verify(&a.dir, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            report.into_result().map(|_| ())
        }
    }
}

fn load_table(path: Option<&Path>) -> Result<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn int(v: impl TryInto<i64>) -> Result<toml::Value> {
    v.try_into()
        .map(toml::Value::Integer)
        .map_err(|_| Error::config("integer flag out of range"))
}

fn list(v: &[usize]) -> Result<toml::Value> {
    Ok(toml::Value::Array(v.iter().map(|&x| int(x)).collect::<Result<_>>()?))
}

fn alpha_value(a: Alpha) -> toml::Value {
    match a {
        Alpha::Finite(x) => toml::Value::Float(x),
        Alpha::Infinity => toml::Value::String("inf".into()),
    }
}

/// Config file merged with flag overrides; flags win.
fn gen_table(a: &GenArgs, langsym: bool) -> Result<toml::Table> {
    let mut t = load_table(a.config.as_deref())?;
    let mut set = |k: &str, v: toml::Value| {
        t.insert(k.to_string(), v);
    };
    if let Some(s) = a.seed {
        set("master_seed", int(s)?);
    }
    if let Some(v) = a.t {
        set("t", int(v)?);
    }
    if let Some(v) = a.k {
        set("k", int(v)?);
    }
    for (key, v) in [("n_choices", &a.n), ("m_choices", &a.m), ("c_choices", &a.c)] {
        if !v.is_empty() {
            set(key, list(v)?);
        }
    }
    if a.shuffle {
        set("shuffle", toml::Value::Boolean(true));
    }
    if let Some(v) = a.shard_size {
        set("shard_size", int(v)?);
    }
    let misplaced = if langsym {
        a.vocab_size.is_some() || a.dim.is_some()
    } else {
        a.word_len.is_some()
    };
    if misplaced {
        return Err(Error::config("flag does not apply to this dataset kind"));
    }
    if let Some(v) = a.vocab_size {
        set("vocab_size", int(v)?);
    }
    if let Some(v) = a.dim {
        set("dim", int(v)?);
    }
    if let Some(v) = a.word_len {
        set("word_len", int(v)?);
    }
    if let Some(alpha) = a.alpha {
        let recipe = t
            .entry("recipe")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match recipe {
            toml::Value::Table(r) => {
                r.insert("alpha".into(), alpha_value(alpha));
            }
            _ => return Err(Error::config("recipe must be a table")),
        }
    }
    Ok(t)
}

fn from_table<T: serde::de::DeserializeOwned>(t: toml::Table) -> Result<T> {
    toml::from_str(&t.to_string()).map_err(|e| Error::config(e.to_string()))
}

fn gen(a: GenArgs, langsym: bool) -> Result<()> {
    if a.workers == 0 {
        return Err(Error::config("--workers must be >= 1"));
    }
    let table = gen_table(&a, langsym)?;
    let spec = if langsym {
        let c: LangSymConfig = from_table(table)?;
        c.validate()?;
        DatasetSpec::Langsym(c)
    } else {
        let c: DatasetConfig = from_table(table)?;
        c.validate()?;
        DatasetSpec::Abstract(c)
    };
    let m = write_dataset(&spec, &a.out, a.workers)?;
    println!(
        "wrote {} records in {} files to {} ({:.2}s)",
        m.sequence_count,
        m.outputs.len(),
        a.out.display(),
        m.wall_clock_secs
    );
    Ok(())
}

/// Records of any supported kind, detected from the first line.
enum Records {
    Sequences(Vec<Sequence>),
    Prompts(Vec<EvalPrompt>),
    Chats(Vec<ChatPrompt>),
    ChatPrompts(Vec<LangSymEvalPrompt>),
}

fn load_records(path: &Path) -> Result<Records> {
    let values: Vec<serde_json::Value> = read_records(path)?;
    let Some(first) = values.first() else {
        return Err(Error::input(format!("{} holds no records", path.display())));
    };
    fn all<T: serde::de::DeserializeOwned>(values: Vec<serde_json::Value>) -> Result<Vec<T>> {
        values
            .into_iter()
            .map(|v| serde_json::from_value(v).map_err(|e| Error::Malformed(e.to_string())))
            .collect()
    }
    let has = |k: &str| first.get(k).is_some();
    Ok(if has("context_tokens") {
        Records::Prompts(all(values)?)
    } else if has("tokens") {
        Records::Sequences(all(values)?)
    } else if has("messages") && has("ground_truth_chain") {
        Records::ChatPrompts(all(values)?)
    } else if has("messages") {
        Records::Chats(all(values)?)
    } else {
        return Err(Error::Malformed(format!("{}: unrecognised record layout", path.display())));
    })
}

fn manifest_of(path: &Path) -> Option<RunManifest> {
    path.is_dir().then(|| RunManifest::load(path).ok()).flatten()
}

fn vocab_for(path: &Path, flag: Option<u32>) -> Result<Vocabulary> {
    let size = match (flag, manifest_of(path).map(|m| m.dataset)) {
        (Some(v), _) => v,
        (None, Some(DatasetSpec::Abstract(c))) => c.vocab_size,
        _ => DatasetConfig::simple(1, 1, 1, 1, 1, Recipe::all_cot(), 0).vocab_size,
    };
    Vocabulary::new(size)
}

fn templates_for(path: &Path, config: Option<&Path>) -> Result<ChatTemplates> {
    if let Some(cfg) = config {
        let c: LangSymConfig = from_table(load_table(Some(cfg))?)?;
        return Ok(c.templates);
    }
    Ok(match manifest_of(path).map(|m| m.dataset) {
        Some(DatasetSpec::Langsym(c)) => c.templates,
        _ => ChatTemplates::default(),
    })
}

fn token_prompts(records: Records, vocab: &Vocabulary) -> Result<Vec<EvalPrompt>> {
    match records {
        Records::Prompts(p) => Ok(p),
        Records::Sequences(s) => s.iter().map(|s| make_eval_prompt(s, vocab)).collect(),
        _ => Err(Error::input("expected abstract-token records")),
    }
}

fn chat_prompts(records: Records) -> Result<Vec<LangSymEvalPrompt>> {
    match records {
        Records::ChatPrompts(p) => Ok(p),
        Records::Chats(c) => c.iter().map(make_langsym_eval_prompt).collect(),
        _ => Err(Error::input("expected chat records")),
    }
}

fn strip(a: StripArgs) -> Result<()> {
    let records = load_records(&a.input)?;
    let n = match records {
        Records::Sequences(_) | Records::Prompts(_) => {
            let vocab = vocab_for(&a.input, None)?;
            let out = token_prompts(records, &vocab)?
                .iter()
                .map(|p| strip_cot(p, a.k_prime, &mut strip_rng(a.seed, p.prompt_id), &vocab))
                .collect::<Result<Vec<_>>>()?;
            write_records(&a.out, &out)?;
            out.len()
        }
        Records::Chats(_) | Records::ChatPrompts(_) => {
            let templates = templates_for(&a.input, a.config.as_deref())?;
            let out = chat_prompts(records)?
                .iter()
                .map(|p| strip_langsym(p, a.k_prime, &templates, &mut strip_rng(a.seed, p.prompt_id)))
                .collect::<Result<Vec<_>>>()?;
            write_records(&a.out, &out)?;
            out.len()
        }
    };
    println!("wrote {n} prompts to {}", a.out.display());
    Ok(())
}

fn write_report<T: Serialize>(path: Option<&Path>, report: &T) -> Result<()> {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(report)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn eval_tokens(a: EvalArgs) -> Result<()> {
    let vocab = vocab_for(&a.prompts, a.vocab_size)?;
    let prompts = token_prompts(load_records(&a.prompts)?, &vocab)?;
    let mut backend: Box<dyn GenerationBackend> = match a.backend {
        TokenBackendKind::Oracle => Box::new(OracleBackend::new()),
        TokenBackendKind::Random => Box::new(RandomBackend::new(vocab, a.seed)),
        TokenBackendKind::Stdio => {
            let cmd = a
                .backend_cmd
                .as_deref()
                .ok_or_else(|| Error::config("--backend stdio needs --backend-cmd"))?;
            Box::new(ProcessBackend::spawn(cmd)?)
        }
    };
    let forcing = ForcingConfig {
        strategy: a.strategy,
        budget: a.budget,
    };
    let report = evaluate(backend.as_mut(), &prompts, &forcing)?;
    write_report(a.report.as_deref(), &report)?;
    print!(
        "{}",
        summary(
            report.n_prompts,
            report.n_correct,
            report.n_format_failure,
            report.n_backend_errors,
            &report.breakdown
        )
    );
    Ok(())
}

fn eval_text(a: EvalLangsymArgs) -> Result<()> {
    let templates = templates_for(&a.prompts, a.config.as_deref())?;
    let prompts = chat_prompts(load_records(&a.prompts)?)?;
    let mut backend: Box<dyn TextBackend> = match a.backend {
        TextBackendKind::Oracle => Box::new(OracleTextBackend::new(templates.clone())),
        TextBackendKind::StdioText => {
            let cmd = a
                .backend_cmd
                .as_deref()
                .ok_or_else(|| Error::config("--backend stdio-text needs --backend-cmd"))?;
            Box::new(ProcessTextBackend::spawn(cmd)?)
        }
    };
    let forcing = TextForcing {
        strategy: a.strategy,
        budget: a.budget,
    };
    let report = evaluate_langsym(backend.as_mut(), &prompts, &forcing, &templates)?;
    write_report(a.report.as_deref(), &report)?;
    print!(
        "{}",
        summary(
            report.n_prompts,
            report.n_correct,
            report.n_format_failure,
            report.n_backend_errors,
            &report.breakdown
        )
    );
    Ok(())
}

fn summary(n: u64, correct: u64, format_failures: u64, errors: u64, b: &Breakdown) -> String {
    let mut s = String::new();
    let acc = if n > 0 { correct as f64 / n as f64 } else { 0.0 };
    let _ = writeln!(s, "accuracy {acc:.4} ({correct}/{n})");
    let _ = writeln!(s, "format failures {format_failures}, backend errors {errors}");
    for t in &b.dag_inclusion {
        for (label, tab) in [("correct", &t.correct_answer), ("wrong", &t.wrong_answer)] {
            let _ = writeln!(
                s,
                "step {} | answer {label:<7} | in-dag {}/{} not-in-dag {}/{} missing {}",
                t.step,
                tab.in_dag_correct,
                tab.in_dag_incorrect,
                tab.not_in_dag_correct,
                tab.not_in_dag_incorrect,
                tab.missing
            );
        }
    }
    if let Some(p) = &b.step_pair {
        for (label, g) in [("correct", &p.correct_answer), ("wrong", &p.wrong_answer)] {
            let _ = writeln!(
                s,
                "steps {}x{} | answer {label:<7} | [[{}, {}], [{}, {}]] missing {}",
                p.steps.0, p.steps.1, g.counts[0][0], g.counts[0][1], g.counts[1][0], g.counts[1][1], g.missing
            );
        }
    }
    s
}

#[derive(Serialize)]
struct BudgetOutput {
    #[serde(flatten)]
    report: BudgetReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_alpha: Option<Alpha>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_tokens: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    token_ratio: Option<f64>,
}

fn budget(a: BudgetArgs) -> Result<()> {
    let recipe = Recipe {
        alpha: a.alpha,
        a: a.a,
        b: a.b,
    };
    let report = expected_tokens(&recipe, a.n, a.c, a.k, a.t)?;
    let baseline = match a.baseline_alpha {
        Some(alpha) => Some(expected_tokens(&Recipe { alpha, ..recipe }, a.n, a.c, a.k, a.t)?.expected_tokens),
        None => None,
    };
    let table = report.table();
    let out = BudgetOutput {
        token_ratio: baseline.map(|b| report.expected_tokens / b),
        report,
        baseline_alpha: a.baseline_alpha,
        baseline_tokens: baseline,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    eprint!("{table}");
    if let (Some(b), Some(r)) = (out.baseline_tokens, out.token_ratio) {
        eprintln!("baseline tokens {b:.3}, ratio {r:.6}");
    }
    Ok(())
}

fn token_label(id: TokenId) -> String {
    match Special::from_id(id) {
        Some(s) => s.tag().to_string(),
        None => id.to_string(),
    }
}

/// One line per example (the `bos` gets its own line); loss-masked tokens
/// carry a trailing `*`. Lines starting with `#` are comments.
pub fn annotate_tokens(tokens: &[TokenId], mask: Option<&[u8]>) -> String {
    let mut out = String::new();
    let mut line = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        let mut label = token_label(t);
        if mask.is_some_and(|m| m.get(i) == Some(&1)) {
            label.push('*');
        }
        line.push(label);
        if t == Special::Bos.id() || t == Special::Eos.id() {
            out.push_str(&line.join(" "));
            out.push('\n');
            line.clear();
        }
    }
    if !line.is_empty() {
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Inverse of [`annotate_tokens`].
pub fn parse_annotation(text: &str) -> Result<(Vec<TokenId>, Vec<u8>)> {
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    for line in text.lines().filter(|l| !l.trim_start().starts_with('#')) {
        for word in line.split_whitespace() {
            let (word, m) = match word.strip_suffix('*') {
                Some(w) => (w, 1),
                None => (word, 0),
            };
            let id = match Special::from_tag(word) {
                Some(s) => s.id(),
                None => word
                    .parse()
                    .map_err(|_| Error::Malformed(format!("bad token {word:?}")))?,
            };
            tokens.push(id);
            mask.push(m);
        }
    }
    Ok((tokens, mask))
}

fn pick<T>(items: Vec<T>, a: &InspectArgs, id: impl Fn(&T) -> u64) -> Result<T> {
    let found = match a.id {
        Some(want) => items.into_iter().find(|x| id(x) == want),
        None => items.into_iter().nth(a.index),
    };
    found.ok_or_else(|| Error::input("no such record"))
}

fn inspect(a: InspectArgs) -> Result<()> {
    let text = match load_records(&a.input)? {
        Records::Sequences(s) => {
            let s = pick(s, &a, |s| s.seq_id)?;
            let m = &s.meta;
            format!(
                "# sequence {} N={} M={} C={} K={} r_cot={} cot={}/{} tokens={}\n# parents {:?}\n{}",
                s.seq_id,
                m.n,
                m.m,
                m.c,
                m.k,
                m.r_cot,
                m.cot_flags.iter().filter(|&&f| f).count(),
                m.k,
                s.tokens.len(),
                m.dag.parents,
                annotate_tokens(&s.tokens, Some(&s.loss_mask))
            )
        }
        Records::Prompts(p) => {
            let p = pick(p, &a, |p| p.prompt_id)?;
            format!(
                "# prompt {} stripped {:?} truth {:?}\n{}",
                p.prompt_id,
                p.stripped,
                p.ground_truth_chain,
                annotate_tokens(&p.tokens(), None)
            )
        }
        Records::Chats(c) => {
            let c = pick(c, &a, |c| c.prompt_id)?;
            let mut s = format!(
                "# prompt {} N={} M={} C={} W={} K={} r_cot={}\n",
                c.prompt_id, c.meta.n, c.meta.m, c.meta.c, c.meta.w, c.meta.k, c.meta.r_cot
            );
            for m in &c.messages {
                let _ = writeln!(s, "--- {}\n{}", serde_json::to_value(m.role)?.as_str().unwrap_or(""), m.content);
            }
            s
        }
        Records::ChatPrompts(c) => {
            let c = pick(c, &a, |c| c.prompt_id)?;
            let mut s = format!("# prompt {} stripped {:?}\n", c.prompt_id, c.stripped);
            for m in &c.messages {
                let _ = writeln!(s, "--- {}\n{}", serde_json::to_value(m.role)?.as_str().unwrap_or(""), m.content);
            }
            s
        }
    };
    print!("{text}");
    Ok(())
}
