//! Latency, size and ablation reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{synth_generate, Dataset, SplitSpec, SynthConfig, TokenizedExample};
use crate::distill::KdConfig;
use crate::encoder::{
    default_layer_indices, init_student_from_teacher, load_checkpoint, truncate, EncoderConfig, Model,
};
use crate::error::{Error, Result};
use crate::evalmetrics::EvalReport;
use crate::quant::quantize_model;
use crate::trainer::{cache_logits, evaluate, train_student, train_teacher, TrainConfig, TrainLog};

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Wall-clock statistics of single-sentence inference, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
    pub warmup: usize,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>, warmup: usize) -> Result<Self> {
        if ms.is_empty() {
            return Err(Error::Validation("no latency samples".into()));
        }
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        let p95 = ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        let mean = ms.iter().sum::<f64>() / n as f64;
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(Self {
            median_ms: median,
            p95_ms: p95,
            mean_ms: mean,
            std_ms: var.sqrt(),
            reps: n,
            warmup,
        })
    }
}

/// Shape of the synthetic input used for timing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub seq_len: usize,
    pub seed: u64,
}

impl InputSpec {
    fn ids(&self, vocab: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.seq_len).map(|_| rng.random_range(0..vocab)).collect()
    }
}

/// Times `reps` per-sentence forward passes (plus Viterbi when the model has
/// a CRF) after `warmup` untimed ones, on a dedicated thread.
pub fn measure_latency(model: &Model, input: &InputSpec, reps: usize, warmup: usize) -> Result<LatencyStats> {
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "latency needs reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}, got {reps} and {warmup}"
        )));
    }
    let ids = input.ids(model.config().vocab_size);
    let mask = vec![1u8; ids.len()];
    let live = vec![true; ids.len()];
    let trans = model.transitions()?;
    let once = || -> Result<usize> {
        let logits = model.emissions(&ids, &mask)?;
        Ok(crate::encoder::decode(&logits, &live, trans.as_ref())?.len())
    };
    let samples = std::thread::scope(|s| {
        s.spawn(|| -> Result<Vec<f64>> {
            for _ in 0..warmup {
                std::hint::black_box(once()?);
            }
            (0..reps)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(once()?);
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect()
        })
        .join()
        .expect("timing thread panicked")
    })?;
    LatencyStats::from_samples(samples, warmup)
}

/// Exact sizes from a model's tensor table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub parameters: usize,
    pub quantized_tensors: usize,
    pub f32_bytes: u64,
    pub int8_bytes: u64,
    /// Eight bytes per quantized tensor for its scale.
    pub scale_bytes: u64,
    /// Whole serialized checkpoint, header included.
    pub file_bytes: u64,
}

impl ModelStats {
    pub fn of(model: &Model) -> Result<Self> {
        let s = model.storage()?;
        let quantized_tensors = model.quantized_layers().map_or(0, |m| m.len());
        Ok(Self {
            parameters: model.num_parameters(),
            quantized_tensors,
            f32_bytes: s.f32_payload,
            int8_bytes: s.int8_payload,
            scale_bytes: 8 * quantized_tensors as u64,
            file_bytes: s.header + s.f32_payload + s.int8_payload,
        })
    }

    /// Tensor storage: 4 bytes per float, 1 per int8 value plus scales.
    pub fn tensor_bytes(&self) -> u64 {
        self.f32_bytes + self.int8_bytes + self.scale_bytes
    }
}

pub fn model_stats(checkpoint: &Path) -> Result<ModelStats> {
    ModelStats::of(&load_checkpoint(checkpoint)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEnv {
    pub threads: usize,
    pub seq_len: usize,
    pub reps: usize,
    pub warmup: usize,
    pub arch: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub precision: String,
    pub layers: usize,
    pub crf: bool,
    pub stats: ModelStats,
    pub latency: LatencyStats,
    /// Baseline median over this model's median.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub env: BenchEnv,
    pub baseline: String,
    pub models: Vec<BenchEntry>,
    /// Names that could not be loaded.
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub seq_len: usize,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            seq_len: 128,
            reps: 50,
            warmup: 5,
            threads: 1,
            seed: 0,
        }
    }
}

/// Benchmarks every named model; `baseline` must be one of them.
pub fn bench_models(models: &[(String, &Model)], baseline: &str, settings: &BenchSettings) -> Result<BenchReport> {
    if settings.threads != 1 {
        return Err(Error::Config(format!(
            "kernels are single-threaded; threads = {} is not supported",
            settings.threads
        )));
    }
    let input = InputSpec {
        seq_len: settings.seq_len,
        seed: settings.seed,
    };
    let mut entries = Vec::with_capacity(models.len());
    for (name, m) in models {
        if settings.seq_len > m.config().max_seq_len {
            return Err(Error::Config(format!(
                "{name}: seq_len {} exceeds max_seq_len {}",
                settings.seq_len,
                m.config().max_seq_len
            )));
        }
        let latency = measure_latency(m, &input, settings.reps, settings.warmup)?;
        info!("{name}: median {:.3} ms", latency.median_ms);
        entries.push(BenchEntry {
            name: name.clone(),
            precision: if m.is_quantized() { "int8-dynamic" } else { "f32" }.into(),
            layers: m.config().num_layers,
            crf: m.has_crf(),
            stats: ModelStats::of(m)?,
            latency,
            speedup: 0.0,
        });
    }
    let base = entries
        .iter()
        .find(|e| e.name == baseline)
        .map(|e| e.latency.median_ms)
        .ok_or_else(|| Error::Config(format!("baseline `{baseline}` is not among the benchmarked models")))?;
    for e in &mut entries {
        e.speedup = base / e.latency.median_ms;
    }
    Ok(BenchReport {
        env: BenchEnv {
            threads: settings.threads,
            seq_len: settings.seq_len,
            reps: settings.reps,
            warmup: settings.warmup,
            arch: std::env::consts::ARCH.into(),
        },
        baseline: baseline.into(),
        models: entries,
        missing: Vec::new(),
    })
}

fn mib(b: u64) -> f64 {
    b as f64 / (1024.0 * 1024.0)
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<24} {:>12} {:>10} {:>12} {:>10} {:>8}",
            "model", "params", "size MiB", "median ms", "p95 ms", "speedup"
        )
        .unwrap();
        for e in &self.models {
            writeln!(
                s,
                "{:<24} {:>12} {:>10.3} {:>12.3} {:>10.3} {:>7.2}x",
                e.name,
                e.stats.parameters,
                mib(e.stats.tensor_bytes()),
                e.latency.median_ms,
                e.latency.p95_ms,
                e.speedup
            )
            .unwrap();
        }
        for m in &self.missing {
            writeln!(s, "{m:<24} (absent)").unwrap();
        }
        writeln!(
            s,
            "threads {}, seq_len {}, {} reps after {} warmup, baseline {}",
            self.env.threads, self.env.seq_len, self.env.reps, self.env.warmup, self.baseline
        )
        .unwrap();
        s
    }
}

/// Row labels of the exact-boundary results table, in order.
pub const TABLE_MODELS: [(&str, &str); 5] = [
    ("teacher", "Teacher (CRF)"),
    ("no_kd", "Student No-KD"),
    ("standard_kd", "Standard KD Student"),
    ("crf_kd", "CRF-KD Student"),
    ("crf_kd_int8", "Quantized CRF-KD (INT8)"),
];

/// Models of the class-wise table.
pub const CLASS_TABLE_MODELS: [&str; 4] = ["teacher", "no_kd", "crf_kd", "crf_kd_int8"];

/// A named checkpoint that may or may not exist.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    /// `None` when the artifact was missing or unreadable.
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub macro_f1: f64,
    pub token_accuracy: f64,
    pub variant: String,
}

/// Evaluation results of one set of trained artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub rows: Vec<SuiteRow>,
    pub sweep: Vec<SweepPoint>,
}

impl SuiteResult {
    pub fn report(&self, name: &str) -> Option<&EvalReport> {
        self.rows
            .iter()
            .find(|r| r.name == name)
            .and_then(|r| r.report.as_ref())
    }

    pub fn missing(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.report.is_none())
            .map(|r| r.name.as_str())
            .collect()
    }
}

/// Macro-F1 and token accuracy of `model` truncated to each depth `1..=L`.
pub fn truncation_sweep(model: &Model, data: &[TokenizedExample], variant: &str) -> Result<Vec<SweepPoint>> {
    (1..=model.config().num_layers)
        .map(|k| {
            let r = evaluate(&truncate(model, k)?, data)?;
            Ok(SweepPoint {
                k,
                macro_f1: r.macro_f1(),
                token_accuracy: r.token_accuracy,
                variant: variant.into(),
            })
        })
        .collect()
}

/// Evaluates the artifacts that load; missing ones are recorded as absent.
///
/// With a `teacher` entry the truncation sweep of that model is included,
/// and every other loaded model contributes a point at its own depth.
pub fn ablation_suite(artifacts: &[Artifact], data: &[TokenizedExample]) -> Result<SuiteResult> {
    let mut models = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        match load_checkpoint(&a.path) {
            Ok(m) => models.push((a.name.clone(), Some(m))),
            Err(e @ (Error::Io { .. } | Error::Corrupt { .. })) => {
                warn!("{}: {e}; listed as absent", a.name);
                models.push((a.name.clone(), None));
            }
            Err(e) => return Err(e),
        }
    }
    let refs: Vec<(String, Option<&Model>)> = models.iter().map(|(n, m)| (n.clone(), m.as_ref())).collect();
    suite_from_models(&refs, data)
}

fn suite_from_models(models: &[(String, Option<&Model>)], data: &[TokenizedExample]) -> Result<SuiteResult> {
    let mut rows = Vec::with_capacity(models.len());
    let mut sweep = Vec::new();
    for (name, m) in models {
        let report = m.map(|m| evaluate(m, data)).transpose()?;
        if let (Some(m), Some(r)) = (m, &report) {
            if name == "teacher" {
                sweep.extend(truncation_sweep(m, data, "truncated_teacher")?);
            } else {
                sweep.push(SweepPoint {
                    k: m.config().num_layers,
                    macro_f1: r.macro_f1(),
                    token_accuracy: r.token_accuracy,
                    variant: name.clone(),
                });
            }
        }
        rows.push(SuiteRow {
            name: name.clone(),
            report,
        });
    }
    Ok(SuiteResult { rows, sweep })
}

/// Desk-scale pipeline: synthetic corpus, teachers, students, quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub synth: SynthConfig,
    /// Train / valid / test sentence counts.
    pub split: [usize; 3],
    pub max_len: usize,
    pub teacher: EncoderConfig,
    pub student_layers: usize,
    /// 1-based teacher layers copied into the student; evenly spaced if absent.
    pub layer_indices: Option<Vec<usize>>,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub kd: KdConfig,
    /// Probability that a training entity is erased to `O`; validation and
    /// test labels stay complete.
    pub train_entity_drop: f64,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                num_sentences: 2750,
                entity_rate: 0.2,
                subword_fraction: 1.0,
                shared_vocab_size: 80,
                ambiguity: 1.0,
                cue_rate: 1.0,
                cue_domains: 3,
                shared_in_filler: false,
                ..Default::default()
            },
            split: [2000, 250, 500],
            max_len: 64,
            teacher: EncoderConfig::default(),
            student_layers: 2,
            layer_indices: None,
            teacher_train: TrainConfig {
                learning_rate: 3e-3,
                max_epochs: 15,
                ..Default::default()
            },
            student_train: TrainConfig {
                learning_rate: 2e-3,
                max_epochs: 10,
                ..Default::default()
            },
            kd: KdConfig::default(),
            train_entity_drop: 0.0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl AblationConfig {
    pub fn dataset(&self) -> Result<Dataset> {
        let corpus = synth_generate(&self.synth)?;
        let (ds, _) = Dataset::prepare(
            &corpus.sentences,
            &corpus.vocab,
            &corpus.scheme,
            self.max_len,
            &SplitSpec::Sizes(self.split),
            self.synth.seed,
        )?;
        let mut ds = ds;
        if self.train_entity_drop > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.synth.seed ^ 0x6e6f697365);
            for ex in &mut ds.train {
                drop_entities(&mut ex.tag_ids, self.train_entity_drop, &mut rng);
            }
        }
        Ok(ds)
    }

    fn teacher_config(&self, ds: &Dataset) -> EncoderConfig {
        EncoderConfig {
            vocab_size: ds.vocab.len(),
            num_tags: ds.scheme.num_tags(),
            max_seq_len: self.max_len,
            ..self.teacher.clone()
        }
    }

    pub fn indices(&self) -> Result<Vec<usize>> {
        match &self.layer_indices {
            Some(v) => Ok(v.clone()),
            None => default_layer_indices(self.teacher.num_layers, self.student_layers),
        }
    }
}

/// Erases each entity to `O` with probability `p`, as in annotation that
/// misses mentions. Tags follow the `O = 0, B-c = 1 + 2c, I-c = 2 + 2c` layout.
fn drop_entities(tags: &mut [i64], p: f64, rng: &mut ChaCha8Rng) {
    let mut class: Option<i64> = None;
    let mut dropping = false;
    for t in tags.iter_mut() {
        if *t < 0 {
            continue;
        }
        if *t == 0 {
            class = None;
            continue;
        }
        let c = (*t - 1) / 2;
        if *t % 2 == 1 || class != Some(c) {
            dropping = rng.random::<f64>() < p;
        }
        class = Some(c);
        if dropping {
            *t = 0;
        }
    }
}

/// Every trained model of one seed.
#[derive(Clone, Debug)]
pub struct SeedModels {
    pub teacher: Model,
    pub linear_teacher: Model,
    pub no_kd: Model,
    pub standard_kd: Model,
    pub crf_kd: Model,
    pub crf_kd_int8: Model,
    pub logs: BTreeMap<String, TrainLog>,
}

impl SeedModels {
    /// Name / model pairs in table order, with the linear teacher last.
    pub fn named(&self) -> Vec<(String, &Model)> {
        vec![
            ("teacher".into(), &self.teacher),
            ("no_kd".into(), &self.no_kd),
            ("standard_kd".into(), &self.standard_kd),
            ("crf_kd".into(), &self.crf_kd),
            ("crf_kd_int8".into(), &self.crf_kd_int8),
            ("linear_teacher".into(), &self.linear_teacher),
        ]
    }
}

/// Trains the five table models and the linear teacher for one seed.
///
/// All students start from the same layer transfer of the CRF teacher and
/// differ only in their soft targets: none, the linear teacher's logits, or
/// the CRF teacher's emissions.
pub fn train_seed(cfg: &AblationConfig, ds: &Dataset, seed: u64) -> Result<SeedModels> {
    let tcfg = cfg.teacher_config(ds);
    let mut scfg = tcfg.clone();
    scfg.num_layers = cfg.student_layers;
    let indices = cfg.indices()?;
    let teacher_train = TrainConfig {
        seed,
        ..cfg.teacher_train.clone()
    };
    let student_train = TrainConfig {
        seed,
        ..cfg.student_train.clone()
    };
    let mut logs = BTreeMap::new();

    let mut teacher = Model::new(tcfg.clone(), ds.scheme.clone(), true, seed)?;
    logs.insert(
        "teacher".into(),
        train_teacher(&mut teacher, &ds.train, &ds.valid, &teacher_train)?,
    );
    let mut linear_teacher = Model::new(tcfg, ds.scheme.clone(), false, seed)?;
    logs.insert(
        "linear_teacher".into(),
        train_teacher(&mut linear_teacher, &ds.train, &ds.valid, &teacher_train)?,
    );
    let crf_cache = cache_logits(&teacher, &ds.train, "teacher")?;
    let linear_cache = cache_logits(&linear_teacher, &ds.train, "linear_teacher")?;

    let student = |name: &str, cache, kd: &KdConfig, logs: &mut BTreeMap<String, TrainLog>| -> Result<Model> {
        let mut s = init_student_from_teacher(&teacher, &scfg, &indices, false)?;
        logs.insert(
            name.into(),
            train_student(&mut s, cache, &ds.train, &ds.valid, kd, &student_train)?,
        );
        Ok(s)
    };
    let hard = KdConfig { alpha: 1.0, ..cfg.kd };
    let no_kd = student("no_kd", &crf_cache, &hard, &mut logs)?;
    let standard_kd = student("standard_kd", &linear_cache, &cfg.kd, &mut logs)?;
    let crf_kd = student("crf_kd", &crf_cache, &cfg.kd, &mut logs)?;
    let (crf_kd_int8, _) = quantize_model(&crf_kd)?;
    Ok(SeedModels {
        teacher,
        linear_teacher,
        no_kd,
        standard_kd,
        crf_kd,
        crf_kd_int8,
        logs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub suite: SuiteResult,
    pub logs: BTreeMap<String, TrainLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub token_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_f1_std: f64,
    /// Mean per-class F1 keyed by class name.
    pub class_f1: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<ModelSummary>,
    /// Sweep points averaged over seeds.
    pub sweep: Vec<SweepPoint>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn summarize(seeds: &[SeedResult]) -> (Vec<ModelSummary>, Vec<SweepPoint>) {
    let names: Vec<String> = seeds
        .first()
        .map_or(Vec::new(), |s| s.suite.rows.iter().map(|r| r.name.clone()).collect());
    let summary = names
        .iter()
        .filter_map(|name| {
            let reports: Vec<&EvalReport> = seeds.iter().filter_map(|s| s.suite.report(name)).collect();
            if reports.is_empty() {
                return None;
            }
            let pick = |f: &dyn Fn(&EvalReport) -> f64| mean(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
            let f1 = pick(&|r| r.macro_f1());
            let var = mean(&reports.iter().map(|r| (r.macro_f1() - f1).powi(2)).collect::<Vec<_>>());
            let mut class_f1 = BTreeMap::new();
            for c in &reports[0].scores.per_class {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.scores.per_class.iter().find(|x| x.class == c.class).map(|x| x.f1))
                    .collect();
                class_f1.insert(c.class.clone(), mean(&vals));
            }
            Some(ModelSummary {
                name: name.clone(),
                token_accuracy: pick(&|r| r.token_accuracy),
                macro_precision: pick(&|r| r.scores.macro_precision),
                macro_recall: pick(&|r| r.scores.macro_recall),
                macro_f1: f1,
                macro_f1_std: var.sqrt(),
                class_f1,
            })
        })
        .collect();
    let mut groups: BTreeMap<(String, usize), Vec<&SweepPoint>> = BTreeMap::new();
    for s in seeds {
        for p in &s.suite.sweep {
            groups.entry((p.variant.clone(), p.k)).or_default().push(p);
        }
    }
    let sweep = groups
        .into_iter()
        .map(|((variant, k), pts)| SweepPoint {
            k,
            macro_f1: mean(&pts.iter().map(|p| p.macro_f1).collect::<Vec<_>>()),
            token_accuracy: mean(&pts.iter().map(|p| p.token_accuracy).collect::<Vec<_>>()),
            variant,
        })
        .collect();
    (summary, sweep)
}

/// Runs [`train_seed`] for every configured seed and evaluates on the test split.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let ds = cfg.dataset()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let models = train_seed(cfg, &ds, seed)?;
        let named: Vec<(String, Option<&Model>)> = models.named().into_iter().map(|(n, m)| (n, Some(m))).collect();
        let suite = suite_from_models(&named, &ds.test)?;
        info!("seed {seed} done in {:.1} s", t.elapsed().as_secs_f64());
        seeds.push(SeedResult {
            seed,
            suite,
            logs: models.logs,
        });
    }
    let (summary, sweep) = summarize(&seeds);
    Ok(AblationReport {
        config: cfg.clone(),
        seeds,
        summary,
        sweep,
    })
}

impl AblationReport {
    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.summary.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Exact-boundary results: accuracy, precision, recall, F1 per model row.
    pub fn main_table(&self) -> String {
        let mut s = format!("{:<26} {:>8} {:>8} {:>8} {:>8}\n", "Model", "Acc", "Prec", "Rec", "F1");
        for (key, label) in TABLE_MODELS {
            match self.model(key) {
                Some(m) => writeln!(
                    s,
                    "{label:<26} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                    100.0 * m.token_accuracy,
                    100.0 * m.macro_precision,
                    100.0 * m.macro_recall,
                    100.0 * m.macro_f1
                ),
                None => writeln!(s, "{label:<26} {:>8} {:>8} {:>8} {:>8}", "-", "-", "-", "-"),
            }
            .unwrap();
        }
        s
    }

    /// Per-class F1 of the class-wise comparison models.
    pub fn class_table(&self) -> String {
        let cols: Vec<Option<&ModelSummary>> = CLASS_TABLE_MODELS.iter().map(|n| self.model(n)).collect();
        let mut s = format!("{:<10}", "Class");
        for n in CLASS_TABLE_MODELS {
            write!(s, " {n:>12}").unwrap();
        }
        s.push('\n');
        let classes: Vec<String> = cols
            .iter()
            .flatten()
            .next()
            .map_or(Vec::new(), |m| m.class_f1.keys().cloned().collect());
        let cell = |v: Option<f64>| v.map_or_else(|| format!(" {:>12}", "-"), |v| format!(" {:>12.2}", 100.0 * v));
        for c in &classes {
            write!(s, "{c:<10}").unwrap();
            for m in &cols {
                s += &cell(m.and_then(|m| m.class_f1.get(c).copied()));
            }
            s.push('\n');
        }
        write!(s, "{:<10}", "Macro F1").unwrap();
        for m in &cols {
            s += &cell(m.map(|m| m.macro_f1));
        }
        s.push('\n');
        s
    }

    pub fn sweep_csv(&self) -> String {
        sweep_csv(&self.sweep)
    }
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("k,macro_f1,token_accuracy,variant\n");
    for p in points {
        writeln!(s, "{},{},{},{}", p.k, p.macro_f1, p.token_accuracy, p.variant).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelScheme;

    #[test]
    fn dropped_entities_vanish_whole() {
        let orig = vec![0, 1, 2, -100, 2, 3, 0, 4, 1, 1, 2];
        let mut all = orig.clone();
        drop_entities(&mut all, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(all, vec![0, 0, 0, -100, 0, 0, 0, 0, 0, 0, 0]);
        let mut none = orig.clone();
        drop_entities(&mut none, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(none, orig);
        let spans = [1..5, 5..6, 7..8, 8..9, 9..11];
        for seed in 0..20 {
            let mut some = orig.clone();
            drop_entities(&mut some, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
            for r in spans.clone() {
                let kept = some[r.clone()] == orig[r.clone()];
                let gone = some[r.clone()].iter().all(|&t| t <= 0);
                assert!(kept || gone, "seed {seed}: span {r:?} partly dropped: {some:?}");
            }
        }
    }

    fn small(layers: usize, crf: bool) -> Model {
        let cfg = EncoderConfig {
            num_layers: layers,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 40,
            max_seq_len: 16,
            num_tags: 5,
            dropout: 0.0,
        };
        Model::new(cfg, LabelScheme::new(["A", "B"]).unwrap(), crf, 1).unwrap()
    }

    #[test]
    fn stats_from_samples() {
        let s = LatencyStats::from_samples((1..=20).map(f64::from).collect(), 5).unwrap();
        assert_eq!(s.median_ms, 10.5);
        assert_eq!(s.p95_ms, 19.0);
        assert_eq!(s.mean_ms, 10.5);
        assert!(LatencyStats::from_samples(vec![], 0).is_err());
    }

    #[test]
    fn self_speedup_and_argument_checks() {
        let m = small(1, true);
        let settings = BenchSettings {
            seq_len: 8,
            reps: 30,
            ..Default::default()
        };
        let r = bench_models(&[("m".into(), &m)], "m", &settings).unwrap();
        assert_eq!(r.models[0].speedup, 1.0);
        assert_eq!(r.models[0].stats.parameters, m.num_parameters());
        assert!(r.table().contains("1.00x"));
        assert!(bench_models(&[("m".into(), &m)], "other", &settings).is_err());
        let input = InputSpec { seq_len: 4, seed: 0 };
        assert!(measure_latency(&m, &input, 29, 5).is_err());
        assert!(measure_latency(&m, &input, 30, 4).is_err());
        let threads = BenchSettings { threads: 2, ..settings };
        assert!(bench_models(&[("m".into(), &m)], "m", &threads).is_err());
    }

    #[test]
    fn stats_count_tensors() {
        let m = small(2, false);
        let s = ModelStats::of(&m).unwrap();
        assert_eq!(s.parameters, m.config().num_parameters());
        assert_eq!(s.f32_bytes, 4 * s.parameters as u64);
        let (q, rep) = quantize_model(&m).unwrap();
        let qs = ModelStats::of(&q).unwrap();
        assert_eq!(qs.parameters, s.parameters);
        assert_eq!(qs.int8_bytes, rep.converted_int8_bytes as u64);
        assert_eq!(qs.scale_bytes, 8 * rep.converted_tensors as u64);
        assert!(qs.tensor_bytes() < s.tensor_bytes());
    }

    #[test]
    fn missing_artifacts_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let m = small(2, true);
        let path = dir.path().join("t.ckpt");
        crate::encoder::save_checkpoint(&m, &path).unwrap();
        let ex = {
            let mut e = TokenizedExample {
                token_ids: vec![2, 5, 6, 3],
                char_spans: vec![None, Some((0, 1)), Some((2, 3)), None],
                tag_ids: vec![-100, 1, 0, -100],
                attention_mask: vec![1; 4],
                word_ids: vec![None, Some(0), Some(1), None],
            };
            e.pad_to(4, 0);
            e
        };
        let arts = [
            Artifact {
                name: "teacher".into(),
                path: path.clone(),
            },
            Artifact {
                name: "crf_kd".into(),
                path: dir.path().join("absent.ckpt"),
            },
        ];
        let r = ablation_suite(&arts, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(r.missing(), vec!["crf_kd"]);
        let sweep: Vec<usize> = r.sweep.iter().map(|p| p.k).collect();
        assert_eq!(sweep, vec![1, 2]);
        let full = evaluate(&m, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(r.sweep[1].macro_f1, full.macro_f1());
        assert_eq!(r.sweep[1].token_accuracy, full.token_accuracy);
        assert!(sweep_csv(&r.sweep).starts_with("k,macro_f1,token_accuracy,variant\n1,"));
    }
}
