//! Optimization loop shared by teachers and students.
//!
//! Batches are drawn by sentence count from a per-epoch seeded shuffle.
//! Validation runs at the end of every epoch, or every `eval_every` steps when
//! set, and the parameters of the best validation macro-F1 are restored
//! before returning.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedExample;
use crate::crf;
use crate::distill::{kd_loss_node, KdConfig, LogitCache};
use crate::encoder::{Batch, Model};
use crate::error::{Error, Result};
use crate::evalmetrics::{EvalReport, Evaluator};
use crate::numerics::{Gradients, Graph, ParamSet, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_fraction: f64,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Steps between validations; `None` validates once per epoch.
    pub eval_every: Option<usize>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 10,
            warmup_fraction: 0.05,
            patience: 3,
            seed: 0,
            eval_every: None,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak over the first `warmup_fraction` of
/// training, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = (config.warmup_fraction * total).ceil();
    let peak = config.learning_rate;
    if step < warm {
        peak * step / warm
    } else if warm >= total {
        peak
    } else {
        peak * (total - step) / (total - warm)
    }
}

/// Decoupled-decay Adam state for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter flag; parameters without it skip weight decay.
    pub decay: Vec<bool>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay: vec![true; params.len()],
            step: 0,
            m: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    /// Biases, norm parameters and CRF transitions are exempt from decay.
    pub fn for_model(params: &ParamSet<T>, weight_decay: f64) -> Self {
        let mut opt = Self::new(params, weight_decay);
        opt.decay = params
            .names()
            .iter()
            .map(|n| !(n.ends_with(".bias") || n.contains("norm") || n.starts_with("crf.")))
            .collect();
        opt
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.all().len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.all().len(),
                params.len()
            )));
        }
        for (i, g) in grads.all().iter().enumerate() {
            if g.len() != params.tensor(i).len() || self.m[i].len() != g.len() {
                return Err(Error::Shape(format!("gradient of `{}`", params.name(i))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::of(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = T::of(self.eps);
        let lr_t = T::of(lr);
        let shrink = T::of(1.0 - lr * self.weight_decay);
        let one = T::one();
        for (i, g) in grads.all().iter().enumerate() {
            let decay = self.decay[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in params.data_mut(i).iter_mut().zip(g.data()).zip(m).zip(v) {
                if decay {
                    *p *= shrink;
                }
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr_t * (*m * c1) / ((*v * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub valid_loss: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` of the restored checkpoint.
    pub best: Option<usize>,
    pub stop_reason: StopReason,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
    Stop {
        reason: StopReason,
        best_eval: Option<usize>,
        best_step: Option<usize>,
        best_macro_f1: Option<f64>,
    },
}

impl TrainLog {
    pub fn best_eval(&self) -> Option<&EvalRecord> {
        self.best.map(|i| &self.evals[i])
    }

    /// One JSON object per line, steps and evaluations interleaved in order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        let push = |out: &mut String, line: Line<'_>| {
            writeln!(out, "{}", serde_json::to_string(&line).expect("serializable")).expect("string write");
        };
        for s in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step < s.step) {
                push(&mut out, Line::Eval(e));
            }
            push(&mut out, Line::Step(s));
        }
        for e in evals {
            push(&mut out, Line::Eval(e));
        }
        let best = self.best_eval();
        push(
            &mut out,
            Line::Stop {
                reason: self.stop_reason,
                best_eval: self.best,
                best_step: best.map(|e| e.step),
                best_macro_f1: best.map(|e| e.macro_f1),
            },
        );
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Strict span metrics of `model` at word level over `data`.
pub fn evaluate(model: &Model, data: &[TokenizedExample]) -> Result<EvalReport> {
    let mut ev = Evaluator::new(model.scheme());
    for ex in data {
        ev.add(&ex.word_tags(), &model.predict_words(ex)?)?;
    }
    Ok(ev.finish())
}

enum Objective<'a> {
    /// Mean per-sentence CRF NLL.
    Crf,
    /// Mean token cross-entropy of the linear head.
    CrossEntropy,
    Distill {
        cache: &'a LogitCache,
        kd: KdConfig,
    },
}

struct LossParts {
    loss: f64,
    ce: Option<f64>,
    kl: Option<f64>,
}

fn supervised_loss(g: &mut Graph<'_, f32>, model: &Model, logits: Var, batch: &Batch) -> Result<Var> {
    match model.crf_index() {
        Some(ci) => {
            let t = g.param(ci);
            crf::batch_nll(g, logits, t, &batch.segments, &batch.gold, None)
        }
        None => {
            let lp = g.log_softmax(logits)?;
            g.pick_mean_neg(lp, &batch.gold)
        }
    }
}

fn record_loss(
    g: &mut Graph<'_, f32>,
    model: &Model,
    objective: &Objective<'_>,
    batch: &Batch,
    indices: &[usize],
    data: &[TokenizedExample],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossParts)> {
    let logits = model.forward_graph(g, batch, rng)?;
    match objective {
        Objective::Crf | Objective::CrossEntropy => {
            let v = supervised_loss(g, model, logits, batch)?;
            let loss = g.value(v).data()[0] as f64;
            Ok((
                v,
                LossParts {
                    loss,
                    ce: None,
                    kl: None,
                },
            ))
        }
        Objective::Distill { cache, kd } => {
            let k = cache.num_tags;
            let mut rows = Vec::with_capacity(batch.rows() * k);
            for &i in indices {
                rows.extend_from_slice(cache.check(i, &data[i].token_ids)?.data());
            }
            let teacher = Tensor::new(vec![batch.rows(), k], rows)?;
            let (v, out) = kd_loss_node(g, logits, &teacher, &batch.gold, kd)?;
            Ok((
                v,
                LossParts {
                    loss: out.loss as f64,
                    ce: Some(out.ce as f64),
                    kl: Some(out.soft as f64),
                },
            ))
        }
    }
}

fn validation_loss(model: &Model, data: &[TokenizedExample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size) {
        let refs: Vec<&TokenizedExample> = chunk.iter().collect();
        let batch = Batch::new(&refs);
        let mut g = Graph::new(model.params());
        let logits = model.forward_graph(&mut g, &batch, None)?;
        let v = supervised_loss(&mut g, model, logits, &batch)?;
        total += g.value(v).data()[0] as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn run(
    model: &mut Model,
    objective: Objective<'_>,
    train: &[TokenizedExample],
    valid: &[TokenizedExample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    if let Objective::Distill { cache, kd } = &objective {
        kd.validate()?;
        if cache.logits.len() != train.len() {
            return Err(Error::Validation(format!(
                "logit cache holds {} examples, training set {}",
                cache.logits.len(),
                train.len()
            )));
        }
        if cache.num_tags != model.config().num_tags {
            return Err(Error::Validation(format!(
                "logit cache has {} tags, model {}",
                cache.num_tags,
                model.config().num_tags
            )));
        }
        for (i, ex) in train.iter().enumerate() {
            cache.check(i, &ex.token_ids)?;
        }
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut opt = AdamW::for_model(model.params(), cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let crf_index = model.crf_index();
    let num_tags = model.config().num_tags;

    let mut log = TrainLog {
        steps: Vec::with_capacity(total_steps),
        evals: Vec::new(),
        best: None,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best_params: Option<ParamSet<f32>> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&TokenizedExample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&refs);
            let (grads, parts) = {
                let mut g = Graph::new(model.params());
                let (loss, parts) = record_loss(&mut g, model, &objective, &batch, idx, train, Some(&mut dropout_rng))?;
                if !parts.loss.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("loss is {}", parts.loss),
                    });
                }
                (g.backward(loss)?, parts)
            };
            let mut grads = grads;
            if !grads.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            let grad_norm = grads.global_norm();
            let clipped = match cfg.clip_norm {
                Some(c) if grad_norm > c => {
                    grads.scale((c / grad_norm) as f32);
                    debug!("step {step}: clipped gradient norm {grad_norm:.4}");
                    true
                }
                _ => false,
            };
            let lr = lr_schedule(step, total_steps, cfg);
            let params = model.params_mut()?;
            opt.step(params, &grads, lr)?;
            if let Some(ci) = crf_index {
                crf::enforce_sentinels(params.data_mut(ci), num_tags);
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: parts.loss,
                ce: parts.ce,
                kl: parts.kl,
                grad_norm,
                clipped,
            });
            step += 1;

            let last_in_epoch = bi + 1 == steps_per_epoch;
            let due = match cfg.eval_every {
                Some(n) => step.is_multiple_of(n),
                None => last_in_epoch,
            };
            if due && !valid.is_empty() {
                let report = evaluate(model, valid)?;
                let rec = EvalRecord {
                    step,
                    epoch,
                    valid_loss: validation_loss(model, valid, cfg.batch_size)?,
                    macro_f1: report.macro_f1(),
                    micro_f1: report.scores.micro_f1,
                    token_accuracy: report.token_accuracy,
                };
                info!(
                    "epoch {epoch} step {step}: valid loss {:.4}, macro-F1 {:.4}",
                    rec.valid_loss, rec.macro_f1
                );
                let improved = log.best_eval().is_none_or(|b| rec.macro_f1 > b.macro_f1);
                log.evals.push(rec);
                if improved {
                    log.best = Some(log.evals.len() - 1);
                    best_params = Some(model.params().clone());
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        log.stop_reason = StopReason::EarlyStop;
                        info!("early stop after {stale} evaluations without improvement");
                        break 'epochs;
                    }
                }
            }
        }
    }
    if let Some(p) = best_params {
        *model.params_mut()? = p;
    }
    Ok(log)
}

/// Trains a teacher in place: CRF NLL with a CRF layer, token cross-entropy
/// without one.
pub fn train_teacher(
    model: &mut Model,
    train: &[TokenizedExample],
    valid: &[TokenizedExample],
    config: &TrainConfig,
) -> Result<TrainLog> {
    let objective = if model.has_crf() {
        Objective::Crf
    } else {
        Objective::CrossEntropy
    };
    run(model, objective, train, valid, config)
}

/// Trains a linear-head student on the distillation loss against cached
/// teacher logits. `cache.logits[i]` must belong to `train[i]`; with
/// `kd.alpha == 1` this is plain cross-entropy training.
pub fn train_student(
    student: &mut Model,
    cache: &LogitCache,
    train: &[TokenizedExample],
    valid: &[TokenizedExample],
    kd: &KdConfig,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if student.has_crf() {
        return Err(Error::Config(
            "students decode with argmax and carry no CRF layer".into(),
        ));
    }
    run(student, Objective::Distill { cache, kd: *kd }, train, valid, config)
}

/// Teacher emission logits for every example, in order.
pub fn cache_logits(teacher: &Model, data: &[TokenizedExample], teacher_id: &str) -> Result<LogitCache> {
    let mut logits = Vec::with_capacity(data.len());
    let mut fingerprints = Vec::with_capacity(data.len());
    for ex in data {
        logits.push(teacher.emissions(&ex.token_ids, &ex.attention_mask)?);
        fingerprints.push(crate::distill::token_fingerprint(&ex.token_ids));
    }
    Ok(LogitCache {
        num_tags: teacher.config().num_tags,
        teacher: teacher_id.to_string(),
        logits,
        fingerprints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_sentence, synth_generate, SynthConfig};
    use crate::encoder::EncoderConfig;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        assert_eq!(lr_schedule(0, 100, &cfg), 0.0);
        assert_eq!(lr_schedule(5, 100, &cfg), 0.5);
        assert_eq!(lr_schedule(10, 100, &cfg), 1.0);
        assert_eq!(lr_schedule(55, 100, &cfg), 0.5);
        assert_eq!(lr_schedule(100, 100, &cfg), 0.0);
        let flat = TrainConfig {
            warmup_fraction: 0.0,
            ..cfg
        };
        assert_eq!(lr_schedule(0, 10, &flat), 1.0);
    }

    fn scalar_params(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v));
        p
    }

    fn grads_of(p: &ParamSet<f64>, g: f64) -> Gradients<f64> {
        let mut graph = Graph::new(p);
        let w = graph.param(0);
        let loss = graph.scale(w, g);
        graph.backward(loss).unwrap()
    }

    #[test]
    fn adamw_first_step() {
        let mut p = scalar_params(0.5);
        let mut opt = AdamW::new(&p, 0.0);
        let g = grads_of(&p, 1.0);
        opt.step(&mut p, &g, 0.1).unwrap();
        let m = 0.1 * 1.0 / (1.0 - 0.9);
        let v = 0.001 * 1.0 / (1.0 - 0.999);
        let expect = 0.5 - 0.1 * m / (f64::sqrt(v) + 1e-8);
        assert!((p.tensor(0).data()[0] - expect).abs() < 1e-12);
        assert!((p.tensor(0).data()[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_and_noop() {
        let mut p = scalar_params(2.0);
        let mut opt = AdamW::new(&p, 0.0);
        let zero = grads_of(&p, 0.0);
        opt.step(&mut p, &zero, 0.1).unwrap();
        assert_eq!(p.tensor(0).data()[0], 2.0);

        let mut opt = AdamW::new(&p, 0.01);
        opt.step(&mut p, &zero, 0.1).unwrap();
        assert!((p.tensor(0).data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);

        let mut other = scalar_params(1.0);
        other.push("b", Tensor::scalar(0.0));
        assert!(matches!(opt.step(&mut other, &zero, 0.1), Err(Error::Shape(_))));
    }

    pub(crate) fn desk_data(n: usize, seed: u64) -> (Model, Vec<TokenizedExample>, Vec<TokenizedExample>) {
        let corpus = synth_generate(&SynthConfig {
            num_sentences: n,
            classes: vec!["A".into(), "B".into()],
            class_weights: vec![0.6, 0.4],
            class_vocab_size: 8,
            filler_vocab_size: 20,
            phrases_per_class: 6,
            seed,
            ..Default::default()
        })
        .unwrap();
        let data: Vec<TokenizedExample> = corpus
            .sentences
            .iter()
            .map(|s| encode_sentence(s, &corpus.vocab, &corpus.scheme, 32).unwrap().example)
            .collect();
        let cfg = EncoderConfig {
            num_layers: 1,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 32,
            num_tags: corpus.scheme.num_tags(),
            dropout: 0.1,
        };
        let model = Model::new(cfg, corpus.scheme.clone(), true, seed).unwrap();
        let valid = data[..n / 5].to_vec();
        let train = data[n / 5..].to_vec();
        (model, train, valid)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 4,
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn teacher_learns_and_is_reproducible() {
        let (m0, train, valid) = desk_data(120, 1);
        let mut a = m0.clone();
        let log = train_teacher(&mut a, &train, &valid, &quick()).unwrap();
        assert_eq!(log.evals.len(), 4);
        assert!(log.steps.windows(2).all(|w| w[0].step + 1 == w[1].step));
        let first = log.steps[..5].iter().map(|s| s.loss).sum::<f64>();
        let last = log.steps[log.steps.len() - 5..].iter().map(|s| s.loss).sum::<f64>();
        assert!(last < first, "loss did not fall: {first} -> {last}");
        let best = log.best_eval().unwrap();
        assert!(log.evals.iter().all(|e| e.macro_f1 <= best.macro_f1));
        assert_eq!(evaluate(&a, &valid).unwrap().macro_f1(), best.macro_f1);

        let mut b = m0.clone();
        let again = train_teacher(&mut b, &train, &valid, &quick()).unwrap();
        assert_eq!(log, again);
        assert_eq!(a.params(), b.params());
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), log.steps.len() + log.evals.len() + 1);
        assert!(text.lines().last().unwrap().contains("\"kind\":\"stop\""));
    }

    #[test]
    fn plateau_triggers_early_stop() {
        let (mut m, train, valid) = desk_data(40, 2);
        let cfg = TrainConfig {
            learning_rate: 1e-12,
            max_epochs: 20,
            batch_size: 16,
            eval_every: Some(1),
            ..Default::default()
        };
        let log = train_teacher(&mut m, &train, &valid, &cfg).unwrap();
        assert_eq!(log.stop_reason, StopReason::EarlyStop);
        assert_eq!(log.evals.len(), 4);
        assert!(log.to_jsonl().contains("\"reason\":\"early_stop\""));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut m, train, valid) = desk_data(20, 3);
        let p = m.params_mut().unwrap();
        let i = p.index_of("head.bias").unwrap();
        p.data_mut(i)[0] = f32::NAN;
        let err = train_teacher(&mut m, &train, &valid, &quick()).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
        assert_eq!(err.exit_code(), 3);
    }

    fn linear_student(teacher: &Model) -> Model {
        crate::encoder::init_student_from_teacher(teacher, teacher.config(), &[1], false).unwrap()
    }

    #[test]
    fn alpha_one_matches_cross_entropy_training() {
        let (teacher, train, valid) = desk_data(60, 4);
        let cache = cache_logits(&teacher, &train, "t").unwrap();
        let mut kd_student = linear_student(&teacher);
        let mut ce_student = kd_student.clone();
        let kd = KdConfig { alpha: 1.0, tau: 4.0 };
        let a = train_student(&mut kd_student, &cache, &train, &valid, &kd, &quick()).unwrap();
        let b = train_teacher(&mut ce_student, &train, &valid, &quick()).unwrap();
        let la: Vec<f64> = a.steps.iter().map(|s| s.loss).collect();
        let lb: Vec<f64> = b.steps.iter().map(|s| s.loss).collect();
        for (x, y) in la.iter().zip(&lb) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
        assert_eq!(la.len(), lb.len());
    }

    #[test]
    fn student_rejects_misaligned_cache() {
        let (teacher, train, valid) = desk_data(30, 5);
        let mut cache = cache_logits(&teacher, &train, "t").unwrap();
        let mut s = linear_student(&teacher);
        cache.fingerprints.swap(0, 1);
        let r = train_student(&mut s, &cache, &train, &valid, &KdConfig::default(), &quick());
        assert!(r.is_err());
        cache.logits.pop();
        cache.fingerprints.pop();
        assert!(train_student(&mut s, &cache, &train, &valid, &KdConfig::default(), &quick()).is_err());
        let mut with_crf = teacher.clone();
        assert!(train_student(&mut with_crf, &cache, &train, &valid, &KdConfig::default(), &quick()).is_err());
    }

    #[test]
    fn bad_configs() {
        for c in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                warmup_fraction: 1.0,
                ..Default::default()
            },
            TrainConfig {
                patience: 0,
                ..Default::default()
            },
            TrainConfig {
                eval_every: Some(0),
                ..Default::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        TrainConfig::default().validate().unwrap();
    }
}
