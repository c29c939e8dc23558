//! Synthetic instruction stream generation and JSONL ingestion.
//!
//! Each task family draws instructions from at least three templates and
//! fills in a short payload; responses are canonical lowercase strings built
//! from the fixed vocabulary. A stream is written as one train and one eval
//! JSONL file per task plus a JSON manifest whose hash covers every file.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const LETTERS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];
const CLASS_NAMES: [&str; 4] = ["red", "green", "blue", "gray"];
const FEATURE_NOISE: f64 = 0.35;
const MAX_TEMPLATE_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    ModularAdd,
    Reverse,
    SortTokens,
    Parity,
    CopyMasked,
    FeatureClassify,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::ModularAdd,
        TaskFamily::Reverse,
        TaskFamily::SortTokens,
        TaskFamily::Parity,
        TaskFamily::CopyMasked,
        TaskFamily::FeatureClassify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::ModularAdd => "modular_add",
            TaskFamily::Reverse => "reverse",
            TaskFamily::SortTokens => "sort_tokens",
            TaskFamily::Parity => "parity",
            TaskFamily::CopyMasked => "copy_masked",
            TaskFamily::FeatureClassify => "feature_classify",
        }
    }

    pub fn default_templates(self) -> Vec<String> {
        let t: &[&str] = match self {
            TaskFamily::ModularAdd => &[
                "add the numbers modulo {p}",
                "sum the values modulo {p}",
                "total modulo {p}",
            ],
            TaskFamily::Reverse => &[
                "reverse the sequence",
                "reverse this sequence",
                "write it in reverse",
            ],
            TaskFamily::SortTokens => &["sort the letters", "sort them in order", "sort letters"],
            TaskFamily::Parity => &[
                "parity of ones",
                "odd or even ones",
                "is the parity of ones odd or even",
            ],
            TaskFamily::CopyMasked => &[
                "copy with {c} masked",
                "copy hiding {c}",
                "copy with {c} blank",
            ],
            TaskFamily::FeatureClassify => &[
                "classify the signal",
                "which signal is this",
                "signal class",
            ],
        };
        t.iter().map(|s| s.to_string()).collect()
    }

    /// Whether instances of this family carry a feature vector.
    pub fn uses_features(self) -> bool {
        self == TaskFamily::FeatureClassify
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamilySpec {
    pub family: TaskFamily,
    #[serde(default)]
    pub instruction_templates: Option<Vec<String>>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Per-task seed; derived from the stream seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TaskFamilySpec {
    pub fn new(family: TaskFamily, n_train: usize, n_eval: usize) -> Self {
        TaskFamilySpec {
            family,
            instruction_templates: None,
            n_train,
            n_eval,
            seed: None,
        }
    }

    pub fn templates(&self) -> Vec<String> {
        self.instruction_templates
            .clone()
            .unwrap_or_else(|| self.family.default_templates())
    }
}

/// One (features, instruction, response) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionInstance {
    pub features: Option<Vec<f64>>,
    pub instruction: String,
    pub response: String,
}

impl InstructionInstance {
    fn key(&self) -> String {
        let mut k = format!("{}\u{1f}{}", self.instruction, self.response);
        if let Some(f) = &self.features {
            for v in f {
                let _ = write!(k, "\u{1f}{:016x}", v.to_bits());
            }
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamTask {
    pub task_id: usize,
    pub name: String,
    pub family: TaskFamily,
    pub train: Vec<InstructionInstance>,
    pub eval: Vec<InstructionInstance>,
}

impl StreamTask {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.eval.is_empty() {
            return Err(Error::Data(format!(
                "task {} needs non-empty train and eval sets",
                self.name
            )));
        }
        let train: HashSet<String> = self.train.iter().map(InstructionInstance::key).collect();
        if self.eval.iter().any(|i| train.contains(&i.key())) {
            return Err(Error::Data(format!(
                "task {} has instances shared by train and eval",
                self.name
            )));
        }
        for inst in self.train.iter().chain(&self.eval) {
            if inst.instruction.trim().is_empty() || inst.response.trim().is_empty() {
                return Err(Error::Data(format!(
                    "task {} has an empty instruction or response",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// JSONL record layout, one instance per line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: String,
    instruction: String,
    features: Option<Vec<f64>>,
    response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub name: String,
    pub family: TaskFamily,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub train_file: String,
    pub eval_file: String,
    pub train_sha256: String,
    pub eval_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub format_version: u32,
    pub seed: u64,
    pub feature_dim: usize,
    pub tasks: Vec<ManifestTask>,
    /// SHA-256 over the task entries, including every data file hash.
    pub manifest_hash: String,
}

impl StreamManifest {
    /// Digest over every field except `manifest_hash` itself.
    pub fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.format_version.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        h.update((self.feature_dim as u64).to_le_bytes());
        for t in &self.tasks {
            for field in [
                t.name.as_str(),
                t.family.as_str(),
                &t.train_file,
                &t.eval_file,
                &t.train_sha256,
                &t.eval_sha256,
            ] {
                h.update((field.len() as u64).to_le_bytes());
                h.update(field.as_bytes());
            }
            h.update((t.n_train as u64).to_le_bytes());
            h.update((t.n_eval as u64).to_le_bytes());
            h.update(t.seed.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn words(template: &str) -> BTreeSet<String> {
    template
        .split_whitespace()
        .filter(|w| !w.starts_with('{') && *w != ":")
        .map(str::to_lowercase)
        .collect()
}

/// Largest `|A∩B| / min(|A|,|B|)` over template pairs from different
/// families, with the offending pair.
pub fn max_cross_family_overlap(specs: &[TaskFamilySpec]) -> (f64, Option<(String, String)>) {
    let mut worst = (0.0, None);
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.family == b.family {
                continue;
            }
            for ta in a.templates() {
                for tb in b.templates() {
                    let wa = words(&ta);
                    let wb = words(&tb);
                    let denom = wa.len().min(wb.len()).max(1) as f64;
                    let overlap = wa.intersection(&wb).count() as f64 / denom;
                    if overlap > worst.0 {
                        worst = (overlap, Some((ta.clone(), tb.clone())));
                    }
                }
            }
        }
    }
    worst
}

fn task_seed(stream_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"task-seed");
    h.update(stream_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn fill(template: &str, p: Option<usize>, c: Option<&str>) -> String {
    let mut s = template.to_string();
    if let Some(p) = p {
        s = s.replace("{p}", &p.to_string());
    }
    if let Some(c) = c {
        s = s.replace("{c}", c);
    }
    s
}

fn letters(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<&'static str> {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| *LETTERS.choose(rng).expect("non-empty"))
        .collect()
}

/// Class prototypes for the feature family, fixed by the task seed.
fn prototypes(seed: u64, feature_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    (0..CLASS_NAMES.len())
        .map(|_| (0..feature_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn sample_instance(
    family: TaskFamily,
    templates: &[String],
    protos: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> InstructionInstance {
    let template = templates
        .choose(rng)
        .expect("templates checked non-empty")
        .as_str();
    match family {
        TaskFamily::ModularAdd => {
            let p = rng.gen_range(2..=9usize);
            let n = rng.gen_range(2..=3);
            let xs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=9)).collect();
            let payload: Vec<String> = xs.iter().map(usize::to_string).collect();
            InstructionInstance {
                features: None,
                instruction: format!("{} : {}", fill(template, Some(p), None), payload.join(" ")),
                response: (xs.iter().sum::<usize>() % p).to_string(),
            }
        }
        TaskFamily::Reverse => {
            let xs = letters(rng, 3, 5);
            let rev: Vec<&str> = xs.iter().rev().copied().collect();
            InstructionInstance {
                features: None,
                instruction: format!("{} : {}", fill(template, None, None), xs.join(" ")),
                response: rev.join(" "),
            }
        }
        TaskFamily::SortTokens => {
            let xs = letters(rng, 3, 5);
            let mut sorted = xs.clone();
            sorted.sort_unstable();
            InstructionInstance {
                features: None,
                instruction: format!("{} : {}", fill(template, None, None), xs.join(" ")),
                response: sorted.join(" "),
            }
        }
        TaskFamily::Parity => {
            let n = rng.gen_range(4..=10);
            let bits: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let ones = bits.iter().filter(|&&b| b == 1).count();
            let payload: Vec<String> = bits.iter().map(u8::to_string).collect();
            InstructionInstance {
                features: None,
                instruction: format!("{} : {}", fill(template, None, None), payload.join(" ")),
                response: if ones % 2 == 1 { "odd" } else { "even" }.to_string(),
            }
        }
        TaskFamily::CopyMasked => {
            let target = *LETTERS.choose(rng).expect("non-empty");
            let mut xs = letters(rng, 3, 5);
            let at = rng.gen_range(0..xs.len());
            xs[at] = target;
            let masked: Vec<&str> = xs
                .iter()
                .map(|&x| if x == target { "_" } else { x })
                .collect();
            InstructionInstance {
                features: None,
                instruction: format!("{} : {}", fill(template, None, Some(target)), xs.join(" ")),
                response: masked.join(" "),
            }
        }
        TaskFamily::FeatureClassify => {
            let class = rng.gen_range(0..protos.len());
            let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid");
            let features = protos[class]
                .iter()
                .map(|p| p + noise.sample(rng))
                .collect();
            InstructionInstance {
                features: Some(features),
                instruction: fill(template, None, None),
                response: CLASS_NAMES[class].to_string(),
            }
        }
    }
}

/// Generates every task of a stream in memory. Deterministic given the
/// specs and `seed`.
pub fn generate_tasks(
    specs: &[TaskFamilySpec],
    seed: u64,
    feature_dim: usize,
) -> Result<Vec<StreamTask>> {
    let families: BTreeSet<TaskFamily> = specs.iter().map(|s| s.family).collect();
    if families.len() < 2 {
        return Err(Error::Config(
            "a stream needs at least two distinct task families".into(),
        ));
    }
    if families.len() != specs.len() {
        return Err(Error::Config(
            "each task family may appear only once per stream".into(),
        ));
    }
    let (overlap, pair) = max_cross_family_overlap(specs);
    if overlap >= MAX_TEMPLATE_OVERLAP {
        let (a, b) = pair.unwrap_or_default();
        return Err(Error::Config(format!(
            "templates {a:?} and {b:?} share {:.0}% of their words (limit {:.0}%)",
            overlap * 100.0,
            MAX_TEMPLATE_OVERLAP * 100.0
        )));
    }
    let mut tasks = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        if spec.n_train == 0 || spec.n_eval == 0 {
            return Err(Error::Config(format!(
                "task {} needs positive n_train and n_eval",
                spec.family
            )));
        }
        let templates = spec.templates();
        if templates.len() < 3 {
            return Err(Error::Config(format!(
                "family {} needs at least 3 templates",
                spec.family
            )));
        }
        for t in &templates {
            vocab::encode_strict(&fill(t, Some(2), Some("a")))
                .map_err(|e| Error::Config(format!("template {t:?} of {}: {e}", spec.family)))?;
        }
        if spec.family.uses_features() && feature_dim == 0 {
            return Err(Error::Config(format!(
                "family {} needs feature_dim > 0",
                spec.family
            )));
        }
        let seed = spec.seed.unwrap_or_else(|| task_seed(seed, index));
        let protos = prototypes(seed, feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wanted = spec.n_train + spec.n_eval;
        let mut seen = HashSet::with_capacity(wanted);
        let mut unique = Vec::with_capacity(wanted);
        let budget = wanted * 200;
        let mut attempts = 0;
        while unique.len() < wanted {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Config(format!(
                    "family {} could only produce {} distinct instances of the {wanted} requested",
                    spec.family,
                    unique.len()
                )));
            }
            let inst = sample_instance(spec.family, &templates, &protos, &mut rng);
            if seen.insert(inst.key()) {
                unique.push(inst);
            }
        }
        let eval = unique.split_off(spec.n_train);
        let task = StreamTask {
            task_id: index,
            name: spec.family.as_str().to_string(),
            family: spec.family,
            train: unique,
            eval,
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

fn to_jsonl(task: &str, instances: &[InstructionInstance]) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        let rec = Record {
            task: task.to_string(),
            instruction: inst.instruction.clone(),
            features: inst.features.clone(),
            response: inst.response.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Builds the manifest and file contents for a stream without touching disk.
pub fn render_stream(
    specs: &[TaskFamilySpec],
    seed: u64,
    feature_dim: usize,
) -> Result<(StreamManifest, Vec<(String, String)>)> {
    let tasks = generate_tasks(specs, seed, feature_dim)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (task, spec) in tasks.iter().zip(specs) {
        let train_file = format!("{:02}_{}.train.jsonl", task.task_id, task.name);
        let eval_file = format!("{:02}_{}.eval.jsonl", task.task_id, task.name);
        let train = to_jsonl(&task.name, &task.train)?;
        let eval = to_jsonl(&task.name, &task.eval)?;
        entries.push(ManifestTask {
            name: task.name.clone(),
            family: task.family,
            n_train: task.train.len(),
            n_eval: task.eval.len(),
            seed: spec.seed.unwrap_or_else(|| task_seed(seed, task.task_id)),
            train_sha256: sha256_hex(train.as_bytes()),
            eval_sha256: sha256_hex(eval.as_bytes()),
            train_file: train_file.clone(),
            eval_file: eval_file.clone(),
        });
        files.push((train_file, train));
        files.push((eval_file, eval));
    }
    let mut manifest = StreamManifest {
        format_version: FORMAT_VERSION,
        seed,
        feature_dim,
        tasks: entries,
        manifest_hash: String::new(),
    };
    manifest.manifest_hash = manifest.compute_hash();
    Ok((manifest, files))
}

/// Writes all data files and `manifest.json` into `dir` (created if needed).
pub fn generate_stream(
    specs: &[TaskFamilySpec],
    seed: u64,
    feature_dim: usize,
    dir: &Path,
) -> Result<StreamManifest> {
    let (manifest, files) = render_stream(specs, seed, feature_dim)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, contents) in &files {
        write_file(&dir.join(name), contents.as_bytes())?;
    }
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<StreamManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: StreamManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.compute_hash() != manifest.manifest_hash {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: "manifest hash does not match its entries".into(),
        });
    }
    Ok(manifest)
}

/// Parses one JSONL file; `expected_task` guards against mixed-up files.
pub fn parse_jsonl(
    path: &Path,
    text: &str,
    expected_task: &str,
    feature_dim: usize,
) -> Result<Vec<InstructionInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.task != expected_task {
            return Err(err(format!(
                "record belongs to task {:?}, expected {expected_task:?}",
                rec.task
            )));
        }
        if rec.instruction.trim().is_empty() {
            return Err(err("empty instruction".into()));
        }
        if rec.response.trim().is_empty() {
            return Err(err("empty response".into()));
        }
        if let Some(f) = &rec.features {
            if f.len() != feature_dim {
                return Err(err(format!(
                    "{} features, manifest declares {feature_dim}",
                    f.len()
                )));
            }
        }
        out.push(InstructionInstance {
            features: rec.features,
            instruction: rec.instruction,
            response: rec.response,
        });
    }
    Ok(out)
}

/// Loads and validates every task listed in the manifest at `path`.
pub fn load_stream(path: &Path) -> Result<Vec<StreamTask>> {
    let manifest = read_manifest(path)?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for (task_id, entry) in manifest.tasks.iter().enumerate() {
        let mut sets = Vec::with_capacity(2);
        for (file, digest) in [
            (&entry.train_file, &entry.train_sha256),
            (&entry.eval_file, &entry.eval_sha256),
        ] {
            let fpath = dir.join(file);
            let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            if &sha256_hex(&bytes) != digest {
                return Err(Error::Integrity {
                    path: fpath,
                    detail: "sha256 does not match the manifest".into(),
                });
            }
            let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
                path: fpath.clone(),
                line: 0,
                msg: e.to_string(),
            })?;
            sets.push(parse_jsonl(
                &fpath,
                &text,
                &entry.name,
                manifest.feature_dim,
            )?);
        }
        let eval = sets.pop().expect("two sets");
        let train = sets.pop().expect("two sets");
        let task = StreamTask {
            task_id,
            name: entry.name.clone(),
            family: entry.family,
            train,
            eval,
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// The reference four-family stream used by the end-to-end experiments.
pub fn reference_specs(n_train: usize, n_eval: usize) -> Vec<TaskFamilySpec> {
    [
        TaskFamily::Reverse,
        TaskFamily::SortTokens,
        TaskFamily::CopyMasked,
        TaskFamily::FeatureClassify,
    ]
    .into_iter()
    .map(|f| TaskFamilySpec::new(f, n_train, n_eval))
    .collect()
}

/// Seed of the generic pretraining corpus; distinct from any stream seed
/// used in the experiments.
pub const PRETRAIN_CORPUS_SEED: u64 = 99;

/// Generic mixed corpus for base pretraining: `n_per_family` instances of
/// every family drawn under `seed`.
pub fn pretraining_corpus(
    seed: u64,
    n_per_family: usize,
    feature_dim: usize,
) -> Result<Vec<InstructionInstance>> {
    if n_per_family == 0 {
        return Err(Error::Data(
            "pretraining corpus needs at least one instance per family".into(),
        ));
    }
    let specs: Vec<TaskFamilySpec> = TaskFamily::ALL
        .into_iter()
        .map(|f| TaskFamilySpec::new(f, n_per_family, 1))
        .collect();
    Ok(generate_tasks(&specs, seed, feature_dim)?
        .into_iter()
        .flat_map(|t| t.train)
        .collect())
}
