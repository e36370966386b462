//! Command-line front end: config resolution, run directories, subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bench::{bench_models, run_ablation, AblationConfig, BenchSettings};
use crate::corpus::{read_corpus, synth_generate, write_corpus, Dataset, LabelScheme, SplitSpec, SynthConfig, Vocab};
use crate::distill::{KdConfig, LogitCache};
use crate::encoder::{
    default_layer_indices, init_student_from_teacher, load_checkpoint, save_checkpoint, EncoderConfig, Model,
};
use crate::error::{Error, Result};
use crate::quant::quantize_model;
use crate::trainer::{cache_logits, evaluate, train_student, train_teacher, TrainConfig};

/// Prefix of environment variables that override config keys; `__` separates levels.
pub const ENV_PREFIX: &str = "CRFKD_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Annotated JSONL corpus read by `prep`.
    pub input: Option<PathBuf>,
    /// Vocabulary file; built from the corpus words when absent.
    pub vocab: Option<PathBuf>,
    /// Prepared bundle directory used by training and evaluation.
    pub bundle: Option<PathBuf>,
    pub classes: Vec<String>,
    pub split: SplitSpec,
    pub max_len: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            vocab: None,
            bundle: None,
            classes: LabelScheme::medical().classes().to_vec(),
            split: SplitSpec::default(),
            max_len: 64,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub encoder: EncoderConfig,
    pub crf: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            crf: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub num_layers: usize,
    /// 1-based teacher layers to copy; evenly spaced when absent.
    pub layer_indices: Option<Vec<usize>>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            layer_indices: None,
        }
    }
}

/// Artifact paths consumed by individual commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    pub teacher: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Named checkpoints for `bench`.
    pub models: BTreeMap<String, PathBuf>,
    pub baseline: Option<String>,
    /// Split used by `eval` (default test) and `cache-logits` (default train).
    pub split: Option<String>,
}

/// Everything a command reads, merged from files, environment and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub kd: KdConfig,
    pub train: TrainConfig,
    pub bench: BenchSettings,
    pub ablation: AblationConfig,
    pub inputs: InputsConfig,
    /// Parent of the timestamped run directories.
    pub output_dir: PathBuf,
    /// Exact run directory; overrides `output_dir`.
    pub run_dir: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            kd: KdConfig::default(),
            train: TrainConfig::default(),
            bench: BenchSettings::default(),
            ablation: AblationConfig::default(),
            inputs: InputsConfig::default(),
            output_dir: PathBuf::from("runs"),
            run_dir: None,
            seed: 0,
            threads: 1,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.threads != 1 {
            return Err(Error::Config(format!(
                "kernels are single-threaded; --threads {} is not supported",
                self.threads
            )));
        }
        self.kd.validate()?;
        self.train.validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Deep merge: objects merge key by key, everything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a config file, resolving its `include` list relative to the file first.
fn load_config_file(path: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<Value> {
    let canon = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    if !seen.insert(canon.clone()) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let Value::Object(obj) = &mut value else {
        return Err(Error::Config(format!(
            "{}: top level must be an object",
            path.display()
        )));
    };
    let includes = match obj.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("{}: bad include entry {other}", path.display()))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::Config(format!("{}: bad include {other}", path.display()))),
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = Value::Object(Map::new());
    for inc in includes {
        merge(&mut out, load_config_file(&dir.join(inc), seen)?);
    }
    merge(&mut out, value);
    seen.remove(&canon);
    Ok(out)
}

/// Sets a dotted key, creating intermediate sections. The key must name a
/// field of `known` (the serialized defaults) or an entry of a map-valued field.
fn set_key(root: &mut Value, known: &Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut k = Some(known);
    for part in &parts {
        k = match k {
            Some(Value::Object(m)) if m.is_empty() => None,
            Some(Value::Object(m)) => Some(
                m.get(*part)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?,
            ),
            Some(_) => return Err(Error::Config(format!("config key `{key}` goes below a value"))),
            None => None,
        };
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// JSON if it parses, otherwise the raw string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// Overrides from `CRFKD_SECTION__KEY=value` variables.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Merges config files, environment overrides and flag overrides, in that
/// order; anything left unset takes its default.
pub fn resolve_config(files: &[PathBuf], env: &[(String, Value)], flags: &[(String, Value)]) -> Result<RunConfig> {
    let known = serde_json::to_value(RunConfig::default())?;
    let mut value = Value::Object(Map::new());
    for f in files {
        let mut seen = BTreeSet::new();
        merge(&mut value, load_config_file(f, &mut seen)?);
    }
    for (k, v) in env.iter().chain(flags) {
        set_key(&mut value, &known, k, v.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Parser, Debug)]
#[command(
    name = "crfkd",
    version,
    about = "Transformer+CRF tagging, emission distillation and INT8 quantization"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// JSON config file; later files override earlier ones.
    #[arg(long, global = true)]
    pub config: Vec<PathBuf>,
    /// Override a config key, e.g. `--set train.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed for splitting, initialization and training (key `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (key `threads`); only 1 is supported.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exact output directory (key `run_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parent of timestamped run directories (key `output_dir`).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic annotated corpus and its vocabulary.
    Synth,
    /// Resolve, tokenize, align and split a corpus into a dataset bundle.
    Prep {
        /// Annotated JSONL corpus (key `data.input`).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Vocabulary file (key `data.vocab`).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train the teacher encoder, with a CRF unless `--no-crf`.
    TrainTeacher {
        /// Dataset bundle (key `data.bundle`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train a linear-head teacher (key `teacher.crf`).
        #[arg(long)]
        no_crf: bool,
    },
    /// Dump frozen teacher emission logits for one split.
    CacheLogits {
        /// Teacher checkpoint (key `inputs.teacher`).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to cache (key `inputs.split`, default train).
        #[arg(long)]
        split: Option<String>,
    },
    /// Build a student by layer transfer and train it with the distillation loss.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Logit cache written by `cache-logits` (key `inputs.cache`).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Hard-loss weight (key `kd.alpha`); 1 trains without distillation.
        #[arg(long)]
        alpha: Option<f64>,
        /// Temperature (key `kd.tau`).
        #[arg(long)]
        tau: Option<f64>,
        /// Student depth (key `student.num_layers`).
        #[arg(long)]
        student_layers: Option<usize>,
        /// Comma-separated 1-based teacher layers (key `student.layer_indices`).
        #[arg(long, value_delimiter = ',')]
        layer_indices: Option<Vec<usize>>,
    },
    /// Convert every fully-connected layer to INT8.
    Quantize {
        /// Checkpoint to convert (key `inputs.model`).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Strict span metrics and confusion matrix on one split.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to score (key `inputs.split`, default test).
        #[arg(long)]
        split: Option<String>,
    },
    /// Latency and size of named checkpoints.
    Bench {
        /// `NAME=PATH`, repeatable (key `inputs.models`).
        #[arg(long = "model", value_name = "NAME=PATH")]
        models: Vec<String>,
        /// Reference model for speedups (key `inputs.baseline`).
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Full desk ablation: teachers, students, quantization, truncation sweep.
    Ablate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Prep { .. } => "prep",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::CacheLogits { .. } => "cache-logits",
            Command::Distill { .. } => "distill",
            Command::Quantize { .. } => "quantize",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Ablate => "ablate",
        }
    }

    /// Flag values as dotted config overrides.
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        let mut path = |k: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                out.push((k.to_string(), Value::String(p.display().to_string())));
            }
        };
        match self {
            Command::Synth | Command::Ablate => {}
            Command::Prep { input, vocab } => {
                path("data.input", input);
                path("data.vocab", vocab);
            }
            Command::TrainTeacher { data, no_crf } => {
                path("data.bundle", data);
                if *no_crf {
                    out.push(("teacher.crf".into(), Value::Bool(false)));
                }
            }
            Command::CacheLogits { teacher, data, split } => {
                path("inputs.teacher", teacher);
                path("data.bundle", data);
                if let Some(s) = split {
                    out.push(("inputs.split".into(), Value::String(s.clone())));
                }
            }
            Command::Distill {
                teacher,
                cache,
                data,
                alpha,
                tau,
                student_layers,
                layer_indices,
            } => {
                path("inputs.teacher", teacher);
                path("inputs.cache", cache);
                path("data.bundle", data);
                if let Some(a) = alpha {
                    out.push(("kd.alpha".into(), serde_json::to_value(a)?));
                }
                if let Some(t) = tau {
                    out.push(("kd.tau".into(), serde_json::to_value(t)?));
                }
                if let Some(n) = student_layers {
                    out.push(("student.num_layers".into(), serde_json::to_value(n)?));
                }
                if let Some(v) = layer_indices {
                    out.push(("student.layer_indices".into(), serde_json::to_value(v)?));
                }
            }
            Command::Quantize { model } => path("inputs.model", model),
            Command::Eval { model, data, split } => {
                path("inputs.model", model);
                path("data.bundle", data);
                if let Some(s) = split {
                    out.push(("inputs.split".into(), Value::String(s.clone())));
                }
            }
            Command::Bench { models, baseline } => {
                if !models.is_empty() {
                    let mut map = Map::new();
                    for m in models {
                        let (name, p) = m
                            .split_once('=')
                            .ok_or_else(|| Error::Config(format!("--model `{m}` is not NAME=PATH")))?;
                        map.insert(name.to_string(), Value::String(p.to_string()));
                    }
                    out.push(("inputs.models".into(), Value::Object(map)));
                }
                if let Some(b) = baseline {
                    out.push(("inputs.baseline".into(), Value::String(b.clone())));
                }
            }
        }
        Ok(out)
    }
}

impl GlobalArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut out: Vec<(String, Value)> = self.set.iter().map(|s| parse_assignment(s)).collect::<Result<_>>()?;
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.into()));
        }
        if let Some(t) = self.threads {
            out.push(("threads".into(), t.into()));
        }
        if let Some(p) = &self.out {
            out.push(("run_dir".into(), Value::String(p.display().to_string())));
        }
        if let Some(p) = &self.output_dir {
            out.push(("output_dir".into(), Value::String(p.display().to_string())));
        }
        Ok(out)
    }
}

fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now())
        .to_string()
        .replace(['-', ':'], "")
}

/// Creates the run directory and writes the resolved config snapshot into it.
fn open_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = match &cfg.run_dir {
        Some(d) => d.clone(),
        None => {
            let stem = format!("{command}-{}", timestamp());
            let mut dir = cfg.output_dir.join(&stem);
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = cfg.output_dir.join(format!("{stem}-{n}"));
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let snapshot = RunConfig {
        run_dir: None,
        ..cfg.clone()
    };
    write_text(
        &dir.join("config.json"),
        &(serde_json::to_string_pretty(&snapshot)? + "\n"),
    )?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn required<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
}

fn load_bundle(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(required(&cfg.data.bundle, "data.bundle")?)
}

fn split<'a>(ds: &'a Dataset, name: &str) -> Result<&'a [crate::corpus::TokenizedExample]> {
    ds.split(name)
        .ok_or_else(|| Error::Config(format!("unknown split `{name}`; expected train, valid or test")))
}

/// Vocabulary of every whitespace-separated word of the corpus, sorted.
fn vocab_from_words<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
    let words: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
    Vocab::with_specials(words)
}

fn cmd_synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = synth_generate(&cfg.data.synth)?;
    write_corpus(&dir.join("corpus.jsonl"), &corpus.sentences)?;
    corpus.vocab.save(&dir.join("vocab.txt"))?;
    info!("{} sentences written to {}", corpus.sentences.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct PrepOutput<'a> {
    #[serde(flatten)]
    stats: &'a crate::corpus::PrepStats,
    bundle_sha256: String,
    unresolved: usize,
}

fn cmd_prep(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scheme = LabelScheme::new(cfg.data.classes.clone())?;
    let (sentences, report) = read_corpus(required(&cfg.data.input, "data.input")?, &scheme)?;
    let vocab = match &cfg.data.vocab {
        Some(p) => Vocab::load(p)?,
        None => vocab_from_words(sentences.iter().map(|s| s.text.as_str()))?,
    };
    let (ds, stats) = Dataset::prepare(&sentences, &vocab, &scheme, cfg.data.max_len, &cfg.data.split, cfg.seed)?;
    let bundle = dir.join("bundle");
    ds.save(&bundle)?;
    let unresolved: Vec<Value> = report
        .unresolved
        .iter()
        .map(|(line, e)| serde_json::json!({"line": line, "entity": e}))
        .collect();
    write_json(&dir.join("unresolved.json"), &unresolved)?;
    let out = PrepOutput {
        stats: &stats,
        bundle_sha256: crate::corpus::bundle_digest(&bundle)?,
        unresolved: unresolved.len(),
    };
    write_json(&dir.join("stats.json"), &out)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn encoder_for(base: &EncoderConfig, ds: &Dataset) -> Result<EncoderConfig> {
    if base.max_seq_len < ds.max_len {
        return Err(Error::Config(format!(
            "encoder max_seq_len {} is shorter than the bundle's max_len {}",
            base.max_seq_len, ds.max_len
        )));
    }
    Ok(EncoderConfig {
        vocab_size: ds.vocab.len(),
        num_tags: ds.scheme.num_tags(),
        ..base.clone()
    })
}

fn report_training(dir: &Path, model: &Model, log: &crate::trainer::TrainLog) -> Result<()> {
    save_checkpoint(model, &dir.join("model.ckpt"))?;
    log.save(&dir.join("train_log.jsonl"))?;
    if let Some(best) = log.best_eval() {
        println!(
            "best step {} (epoch {}): valid macro-F1 {:.4}, stop: {:?}",
            best.step, best.epoch, best.macro_f1, log.stop_reason
        );
    }
    Ok(())
}

fn cmd_train_teacher(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ds = load_bundle(cfg)?;
    let enc = encoder_for(&cfg.teacher.encoder, &ds)?;
    let mut model = Model::new(enc, ds.scheme.clone(), cfg.teacher.crf, cfg.seed)?;
    let log = train_teacher(&mut model, &ds.train, &ds.valid, &cfg.train_config())?;
    report_training(dir, &model, &log)
}

fn cmd_cache_logits(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher_path = required(&cfg.inputs.teacher, "inputs.teacher")?;
    let teacher = load_checkpoint(teacher_path)?;
    let ds = load_bundle(cfg)?;
    let name = cfg.inputs.split.as_deref().unwrap_or("train");
    let bytes = fs::read(teacher_path).map_err(|e| Error::io(teacher_path, e))?;
    let id = format!("sha256:{}", &hex::encode(Sha256::digest(&bytes))[..16]);
    let cache = cache_logits(&teacher, split(&ds, name)?, &id)?;
    cache.save(&dir.join("logits"))?;
    println!("{} rows cached from {}", cache.logits.len(), teacher_path.display());
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load_checkpoint(required(&cfg.inputs.teacher, "inputs.teacher")?)?;
    let cache = LogitCache::load(required(&cfg.inputs.cache, "inputs.cache")?)?;
    let ds = load_bundle(cfg)?;
    let scfg = EncoderConfig {
        num_layers: cfg.student.num_layers,
        ..teacher.config().clone()
    };
    let indices = match &cfg.student.layer_indices {
        Some(v) => v.clone(),
        None => default_layer_indices(teacher.config().num_layers, cfg.student.num_layers)?,
    };
    info!("student layers from teacher {indices:?}");
    let mut student = init_student_from_teacher(&teacher, &scfg, &indices, false)?;
    let log = train_student(&mut student, &cache, &ds.train, &ds.valid, &cfg.kd, &cfg.train_config())?;
    report_training(dir, &student, &log)
}

fn cmd_quantize(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_checkpoint(required(&cfg.inputs.model, "inputs.model")?)?;
    let (q, report) = quantize_model(&model)?;
    let out = dir.join("model.ckpt");
    save_checkpoint(&q, &out)?;
    write_json(&dir.join("quant_report.json"), &report)?;
    println!(
        "{} tensors converted: {} -> {} bytes (ratio {:.3})",
        report.converted_tensors,
        report.converted_fp32_bytes,
        report.converted_int8_bytes,
        report.converted_int8_bytes as f64 / report.converted_fp32_bytes.max(1) as f64
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_checkpoint(required(&cfg.inputs.model, "inputs.model")?)?;
    let ds = load_bundle(cfg)?;
    let name = cfg.inputs.split.as_deref().unwrap_or("test");
    let report = evaluate(&model, split(&ds, name)?)?;
    write_text(&dir.join("eval.json"), &(report.to_json() + "\n"))?;
    write_text(&dir.join("confusion.csv"), &report.confusion.to_csv())?;
    let table = format!("token accuracy {:.4}\n{}", report.token_accuracy, report.table());
    write_text(&dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if cfg.inputs.models.is_empty() {
        return Err(Error::Config("bench needs at least one --model NAME=PATH".into()));
    }
    let mut loaded = Vec::new();
    let mut missing = Vec::new();
    for (name, path) in &cfg.inputs.models {
        match load_checkpoint(path) {
            Ok(m) => loaded.push((name.clone(), m)),
            Err(e) => {
                warn!("{name}: {e}; listed as absent");
                missing.push(name.clone());
            }
        }
    }
    let baseline = match &cfg.inputs.baseline {
        Some(b) if loaded.iter().any(|(n, _)| n == b) => b.clone(),
        Some(b) => {
            let fallback = loaded.first().map(|(n, _)| n.clone());
            warn!("baseline `{b}` is absent; speedups are relative to {fallback:?}");
            fallback.unwrap_or_default()
        }
        None => loaded.first().map(|(n, _)| n.clone()).unwrap_or_default(),
    };
    let settings = BenchSettings {
        threads: cfg.threads,
        ..cfg.bench.clone()
    };
    let mut report = if loaded.is_empty() {
        warn!("no model could be loaded");
        crate::bench::BenchReport {
            env: crate::bench::BenchEnv {
                threads: settings.threads,
                seq_len: settings.seq_len,
                reps: settings.reps,
                warmup: settings.warmup,
                arch: std::env::consts::ARCH.into(),
            },
            baseline,
            models: Vec::new(),
            missing: Vec::new(),
        }
    } else {
        let refs: Vec<(String, &Model)> = loaded.iter().map(|(n, m)| (n.clone(), m)).collect();
        bench_models(&refs, &baseline, &settings)?
    };
    report.missing = missing;
    write_json(&dir.join("bench.json"), &report)?;
    let table = report.table();
    write_text(&dir.join("bench.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let report = run_ablation(&cfg.ablation)?;
    write_text(&dir.join("ablation.json"), &(report.to_json() + "\n"))?;
    write_text(&dir.join("results_table.txt"), &report.main_table())?;
    write_text(&dir.join("class_table.txt"), &report.class_table())?;
    write_text(&dir.join("truncation_sweep.csv"), &report.sweep_csv())?;
    print!("{}\n{}", report.main_table(), report.class_table());
    Ok(())
}

/// Resolves the config, opens the run directory and dispatches.
pub fn execute(cli: &Cli, env: &[(String, Value)]) -> Result<PathBuf> {
    let mut flags = cli.global.overrides()?;
    flags.extend(cli.command.overrides()?);
    let cfg = resolve_config(&cli.global.config, env, &flags)?;
    let dir = open_run_dir(&cfg, cli.command.name())?;
    info!("run directory {}", dir.display());
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &dir),
        Command::Prep { .. } => cmd_prep(&cfg, &dir),
        Command::TrainTeacher { .. } => cmd_train_teacher(&cfg, &dir),
        Command::CacheLogits { .. } => cmd_cache_logits(&cfg, &dir),
        Command::Distill { .. } => cmd_distill(&cfg, &dir),
        Command::Quantize { .. } => cmd_quantize(&cfg, &dir),
        Command::Eval { .. } => cmd_eval(&cfg, &dir),
        Command::Bench { .. } => cmd_bench(&cfg, &dir),
        Command::Ablate => cmd_ablate(&cfg, &dir),
    }?;
    Ok(dir)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env = env_overrides(std::env::vars());
    match execute(&cli, &env) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn includes_and_overrides_layer_in_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("base.json"),
            r#"{"train": {"learning_rate": 0.01, "batch_size": 4}, "seed": 3}"#,
        )
        .unwrap();
        fs::write(
            dir.path().join("run.json"),
            r#"{"include": "base.json", "train": {"batch_size": 8}}"#,
        )
        .unwrap();
        let env = env_overrides([
            ("CRFKD_KD__TAU".to_string(), "2".to_string()),
            ("HOME".into(), "/x".into()),
        ]);
        let cfg = resolve_config(
            &[dir.path().join("run.json")],
            &env,
            &[
                ("seed".into(), Value::from(9)),
                ("data.input".into(), parse_value("c.jsonl")),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.kd.tau, 2.0);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.data.input, Some(PathBuf::from("c.jsonl")));
    }

    #[test]
    fn bad_keys_and_cycles_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        fs::write(&a, r#"{"include": "b.json"}"#).unwrap();
        fs::write(dir.path().join("b.json"), r#"{"include": "a.json"}"#).unwrap();
        let code = |r: Result<RunConfig>| r.unwrap_err().exit_code();
        assert_eq!(code(resolve_config(&[a], &[], &[])), 1);
        assert_eq!(
            code(resolve_config(&[], &[], &[("train.nope".into(), Value::from(1))])),
            1
        );
        assert_eq!(code(resolve_config(&[], &[], &[("threads".into(), Value::from(4))])), 1);
        assert_eq!(
            code(resolve_config(&[], &[], &[("kd.alpha".into(), Value::from(2.0))])),
            1
        );
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["crfkd", "no-such-command"]), 1);
        assert_eq!(run(["crfkd", "eval", "--threads", "2"]), 1);
        assert_eq!(run(["crfkd", "--help"]), 0);
    }
}
