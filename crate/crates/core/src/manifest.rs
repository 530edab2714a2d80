//! On-disk datasets: sharded JSON-lines output, binary artifacts and a
//! manifest of content hashes that is enough to regenerate everything.
//!
//! ```text
//! <out>/manifest.json
//! <out>/embedding.bin        abstract only
//! <out>/processors.bin       abstract only
//! <out>/shard-00000.jsonl    one record per line, output order
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::langsym::{generate_langsym_many, ChatPrompt, LangSymConfig};
use crate::rng::SeqRng;
use crate::sequence::{AbstractGenerator, DatasetConfig, Sequence};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDING_FILE: &str = "embedding.bin";
pub const PROCESSORS_FILE: &str = "processors.bin";

pub fn tool_version() -> String {
    format!("cotlab {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum DatasetSpec {
    Abstract(DatasetConfig),
    Langsym(LangSymConfig),
}

impl DatasetSpec {
    fn t(&self) -> u64 {
        match self {
            DatasetSpec::Abstract(c) => c.t,
            DatasetSpec::Langsym(c) => c.t,
        }
    }

    fn shard_size(&self) -> usize {
        match self {
            DatasetSpec::Abstract(c) => c.shard_size,
            DatasetSpec::Langsym(c) => c.shard_size,
        }
    }

    fn output_order(&self) -> Vec<u64> {
        match self {
            DatasetSpec::Abstract(c) => c.output_order(),
            DatasetSpec::Langsym(c) => c.output_order(),
        }
    }

    fn shuffled(&self) -> bool {
        match self {
            DatasetSpec::Abstract(c) => c.shuffle,
            DatasetSpec::Langsym(c) => c.shuffle,
        }
    }

    pub fn num_shards(&self) -> usize {
        (self.t() as usize).div_ceil(self.shard_size())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    /// Records (or rows/processors for binary artifacts).
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    #[serde(flatten)]
    pub dataset: DatasetSpec,
    pub outputs: Vec<OutputEntry>,
    pub sequence_count: u64,
    pub wall_clock_secs: f64,
    /// Output position → generation index, present when shuffled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<u64>>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Shard files in output order.
    pub fn shard_paths(&self, dir: &Path) -> Vec<PathBuf> {
        let mut shards: Vec<_> = self.outputs.iter().filter_map(|o| o.shard.map(|s| (s, &o.path))).collect();
        shards.sort_unstable();
        shards.into_iter().map(|(_, p)| dir.join(p)).collect()
    }
}

/// Generates one shard and serializes it as JSON lines.
pub struct ShardWriter<'a> {
    inner: Inner<'a>,
    order: Vec<u64>,
    shard_size: usize,
}

enum Inner<'a> {
    Abstract(Box<AbstractGenerator>),
    Langsym(&'a LangSymConfig),
}

impl<'a> ShardWriter<'a> {
    pub fn new(spec: &'a DatasetSpec) -> Result<Self> {
        let inner = match spec {
            DatasetSpec::Abstract(c) => Inner::Abstract(Box::new(AbstractGenerator::new(c.clone())?)),
            DatasetSpec::Langsym(c) => {
                c.validate()?;
                Inner::Langsym(c)
            }
        };
        Ok(Self {
            inner,
            order: spec.output_order(),
            shard_size: spec.shard_size(),
        })
    }

    pub fn generator(&self) -> Option<&AbstractGenerator> {
        match &self.inner {
            Inner::Abstract(g) => Some(g),
            Inner::Langsym(_) => None,
        }
    }

    pub fn ids(&self, shard: usize) -> &[u64] {
        let lo = (shard * self.shard_size).min(self.order.len());
        let hi = (lo + self.shard_size).min(self.order.len());
        &self.order[lo..hi]
    }

    pub fn shard_bytes(&self, shard: usize, workers: usize) -> Result<(Vec<u8>, u64)> {
        let ids = self.ids(shard);
        let mut out = Vec::new();
        match &self.inner {
            Inner::Abstract(g) => {
                for seq in g.generate_many(ids, workers)? {
                    push_line(&mut out, &seq)?;
                }
            }
            Inner::Langsym(c) => {
                for p in generate_langsym_many(c, ids, workers)? {
                    push_line(&mut out, &p)?;
                }
            }
        }
        Ok((out, ids.len() as u64))
    }

    /// Binary side artifacts (`embedding.bin`, `processors.bin`).
    pub fn artifacts(&self) -> Result<Vec<(&'static str, Vec<u8>, u64)>> {
        let Some(g) = self.generator() else {
            return Ok(Vec::new());
        };
        let mut emb = Vec::new();
        g.embedding().write_to(&mut emb).map_err(|e| Error::io(EMBEDDING_FILE, e))?;
        let mut procs = Vec::new();
        g.cache().write_to(&mut procs).map_err(|e| Error::io(PROCESSORS_FILE, e))?;
        Ok(vec![
            (EMBEDDING_FILE, emb, g.embedding().rows() as u64),
            (PROCESSORS_FILE, procs, g.cache().len() as u64),
        ])
    }
}

fn push_line<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.push(b'\n');
    Ok(())
}

/// Writes the whole dataset and its manifest into `out_dir`.
pub fn write_dataset(spec: &DatasetSpec, out_dir: &Path, workers: usize) -> Result<RunManifest> {
    let start = Instant::now();
    let writer = ShardWriter::new(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs = Vec::new();
    let write = |name: &str, bytes: &[u8]| {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    for (name, bytes, count) in writer.artifacts()? {
        write(name, &bytes)?;
        outputs.push(OutputEntry {
            path: name.into(),
            sha256: sha256_hex(&bytes),
            count,
            shard: None,
        });
    }
    for shard in 0..spec.num_shards() {
        let (bytes, count) = writer.shard_bytes(shard, workers)?;
        let name = shard_file_name(shard);
        write(&name, &bytes)?;
        outputs.push(OutputEntry {
            path: name,
            sha256: sha256_hex(&bytes),
            count,
            shard: Some(shard),
        });
    }
    let manifest = RunManifest {
        tool_version: tool_version(),
        dataset: spec.clone(),
        outputs,
        sequence_count: spec.t(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        permutation: spec.shuffled().then(|| writer.order.clone()),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Regenerate only this many randomly chosen shards; `None` means all.
    pub sample: Option<usize>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            sample: None,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub files_hashed: usize,
    pub shards_regenerated: Vec<usize>,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_ok() {
            Ok(self)
        } else {
            Err(Error::Verification(self.mismatches.join("; ")))
        }
    }
}

/// Re-hashes every output file and regenerates the artifacts plus the
/// selected shards, comparing against the manifest.
pub fn verify(dir: &Path, opts: &VerifyOptions) -> Result<VerifyReport> {
    let manifest = RunManifest::load(dir)?;
    let mut report = VerifyReport::default();
    for out in &manifest.outputs {
        let path = dir.join(&out.path);
        match fs::read(&path) {
            Ok(bytes) => {
                if sha256_hex(&bytes) != out.sha256 {
                    report.mismatches.push(format!("{} content differs from its recorded hash", out.path));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                report.mismatches.push(format!("{} is missing", out.path));
            }
            Err(e) => return Err(Error::io(path, e)),
        }
        report.files_hashed += 1;
    }

    let spec = &manifest.dataset;
    let writer = ShardWriter::new(spec)?;
    if let Some(perm) = &manifest.permutation {
        if *perm != writer.order {
            report.mismatches.push("recorded shuffle permutation differs".into());
        }
    }
    let recorded = |name: &str| manifest.outputs.iter().find(|o| o.path == name);
    for (name, bytes, _) in writer.artifacts()? {
        match recorded(name) {
            Some(o) if o.sha256 == sha256_hex(&bytes) => {}
            Some(_) => report.mismatches.push(format!("regenerated {name} differs")),
            None => report.mismatches.push(format!("{name} not recorded")),
        }
    }

    let n_shards = spec.num_shards();
    let mut shards = match opts.sample {
        Some(s) if s < n_shards => SeqRng::from_seed(opts.seed).choose_distinct(n_shards, s),
        _ => (0..n_shards).collect(),
    };
    shards.sort_unstable();
    for &shard in &shards {
        let name = shard_file_name(shard);
        let (bytes, count) = writer.shard_bytes(shard, opts.workers)?;
        match manifest.outputs.iter().find(|o| o.shard == Some(shard)) {
            Some(o) if o.sha256 == sha256_hex(&bytes) && o.count == count => {}
            Some(_) => report.mismatches.push(format!("regenerated {name} differs")),
            None => report.mismatches.push(format!("{name} not recorded")),
        }
    }
    report.shards_regenerated = shards;
    Ok(report)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// JSON-lines records from a dataset directory (all shards in order) or a
/// single file.
pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if path.is_dir() {
        let manifest = RunManifest::load(path)?;
        let mut out = Vec::new();
        for shard in manifest.shard_paths(path) {
            out.extend(read_lines(&shard)?);
        }
        Ok(out)
    } else {
        read_lines(path)
    }
}

pub fn read_sequences(path: &Path) -> Result<Vec<Sequence>> {
    read_records(path)
}

pub fn read_chat_prompts(path: &Path) -> Result<Vec<ChatPrompt>> {
    read_records(path)
}

/// Writes records as JSON lines.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for r in records {
        push_line(&mut out, r)?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::{Alpha, Recipe};

    fn small_abstract() -> DatasetSpec {
        let mut c = DatasetConfig::simple(3, 2, 3, 4, 25, Recipe::power(Alpha::Finite(1.0)), 5);
        c.shard_size = 10;
        c.cache_size = 16;
        c.vocab_size = 64;
        c.shuffle = true;
        DatasetSpec::Abstract(c)
    }

    #[test]
    fn write_then_verify_then_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&small_abstract(), dir.path(), 2).unwrap();
        assert_eq!(m.outputs.len(), 2 + 3);
        assert_eq!(m.outputs.iter().filter_map(|o| o.shard).count(), 3);
        assert_eq!(m.permutation.as_ref().unwrap().len(), 25);
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);

        let report = verify(dir.path(), &VerifyOptions::default()).unwrap();
        assert!(report.is_ok(), "{report:?}");
        assert_eq!(report.shards_regenerated, vec![0, 1, 2]);

        let seqs = read_sequences(dir.path()).unwrap();
        assert_eq!(seqs.len(), 25);
        let ids: Vec<u64> = seqs.iter().map(|s| s.seq_id).collect();
        assert_eq!(&ids, m.permutation.as_ref().unwrap());

        let shard = dir.path().join(shard_file_name(1));
        let mut bytes = fs::read(&shard).unwrap();
        bytes[7] ^= 1;
        fs::write(&shard, bytes).unwrap();
        let err = verify(dir.path(), &VerifyOptions::default()).unwrap().into_result().unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn sampled_verify_and_langsym() {
        let mut c = LangSymConfig::simple(3, 2, 2, 3, 12, Recipe::all_cot(), 9);
        c.shard_size = 5;
        let spec = DatasetSpec::Langsym(c);
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&spec, dir.path(), 1).unwrap();
        assert_eq!(m.outputs.len(), 3);
        let opts = VerifyOptions {
            sample: Some(2),
            workers: 3,
            seed: 1,
        };
        let report = verify(dir.path(), &opts).unwrap();
        assert!(report.is_ok());
        assert_eq!(report.shards_regenerated.len(), 2);
        assert_eq!(report.files_hashed, 3);
        assert_eq!(read_chat_prompts(dir.path()).unwrap().len(), 12);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["kind"], "langsym");
        assert!(v["config"].is_object() && v["tool_version"].is_string());
    }

    #[test]
    fn missing_file_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small_abstract(), dir.path(), 1).unwrap();
        fs::remove_file(dir.path().join(EMBEDDING_FILE)).unwrap();
        let report = verify(dir.path(), &VerifyOptions::default()).unwrap();
        assert_eq!(report.mismatches.len(), 1);
    }
}
