//! Pre-norm transformer encoder with a linear tag head and optional CRF.

mod checkpoint;
mod forward;
mod transfer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelScheme, TokenizedExample};
use crate::crf::{self, EmissionView, TransitionMatrix};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::quant::QuantizedLinear;

pub use checkpoint::{load_checkpoint, save_checkpoint, StorageBreakdown, CHECKPOINT_MAGIC};
pub use forward::Batch;
pub use transfer::{default_layer_indices, init_student_from_teacher, truncate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_tags: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 0,
            max_seq_len: 128,
            num_tags: 13,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.num_tags == 0 {
            return bad("ffn_dim, vocab_size, max_seq_len and num_tags must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter count implied by the shapes, CRF excluded.
    pub fn num_parameters(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim;
        let embeddings = (self.vocab_size + self.max_seq_len) * d;
        let block = 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        let head = d * self.num_tags + self.num_tags;
        embeddings + self.num_layers * block + 2 * d + head
    }
}

/// Names of the four projections of an attention sublayer.
pub const ATTN_PROJ: [&str; 4] = ["q", "k", "v", "o"];

/// Parameter indices of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockIdx {
    pub attn_norm: (usize, usize),
    pub proj: [(usize, usize); 4],
    pub ffn_norm: (usize, usize),
    pub up: (usize, usize),
    pub down: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub token: usize,
    pub position: usize,
    pub blocks: Vec<BlockIdx>,
    pub final_norm: (usize, usize),
    pub head: (usize, usize),
    pub crf: Option<usize>,
}

fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

/// Canonical parameter names and shapes in storage order.
pub(crate) fn param_specs(cfg: &EncoderConfig, with_crf: bool) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let mut v = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab_size, d]),
        ("embeddings.position".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for i in 0..cfg.num_layers {
        let p = block_prefix(i);
        v.push((format!("{p}.attn_norm.gamma"), vec![d]));
        v.push((format!("{p}.attn_norm.beta"), vec![d]));
        for name in ATTN_PROJ {
            v.push((format!("{p}.attn.{name}.weight"), vec![d, d]));
            v.push((format!("{p}.attn.{name}.bias"), vec![d]));
        }
        v.push((format!("{p}.ffn_norm.gamma"), vec![d]));
        v.push((format!("{p}.ffn_norm.beta"), vec![d]));
        v.push((format!("{p}.ffn.up.weight"), vec![d, f]));
        v.push((format!("{p}.ffn.up.bias"), vec![f]));
        v.push((format!("{p}.ffn.down.weight"), vec![f, d]));
        v.push((format!("{p}.ffn.down.bias"), vec![d]));
    }
    v.push(("final_norm.gamma".to_string(), vec![d]));
    v.push(("final_norm.beta".to_string(), vec![d]));
    v.push(("head.weight".to_string(), vec![d, cfg.num_tags]));
    v.push(("head.bias".to_string(), vec![cfg.num_tags]));
    if with_crf {
        v.push(("crf.transitions".to_string(), vec![cfg.num_tags + 2, cfg.num_tags + 2]));
    }
    v
}

/// Prefixes of every fully-connected layer (`<prefix>.weight`, `<prefix>.bias`).
pub fn linear_prefixes(cfg: &EncoderConfig) -> Vec<String> {
    let mut v = Vec::new();
    for i in 0..cfg.num_layers {
        let p = block_prefix(i);
        for name in ATTN_PROJ {
            v.push(format!("{p}.attn.{name}"));
        }
        v.push(format!("{p}.ffn.up"));
        v.push(format!("{p}.ffn.down"));
    }
    v.push("head".to_string());
    v
}

impl Layout {
    fn build<T: crate::numerics::Real>(params: &ParamSet<T>, cfg: &EncoderConfig) -> Result<Self> {
        let idx = |n: &str| {
            params
                .index_of(n)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{n}`")))
        };
        let pair = |p: &str, a: &str, b: &str| -> Result<(usize, usize)> {
            Ok((idx(&format!("{p}.{a}"))?, idx(&format!("{p}.{b}"))?))
        };
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = block_prefix(i);
            let mut proj = [(0, 0); 4];
            for (slot, name) in proj.iter_mut().zip(ATTN_PROJ) {
                *slot = pair(&format!("{p}.attn.{name}"), "weight", "bias")?;
            }
            blocks.push(BlockIdx {
                attn_norm: pair(&format!("{p}.attn_norm"), "gamma", "beta")?,
                proj,
                ffn_norm: pair(&format!("{p}.ffn_norm"), "gamma", "beta")?,
                up: pair(&format!("{p}.ffn.up"), "weight", "bias")?,
                down: pair(&format!("{p}.ffn.down"), "weight", "bias")?,
            });
        }
        Ok(Self {
            token: idx("embeddings.token")?,
            position: idx("embeddings.position")?,
            blocks,
            final_norm: pair("final_norm", "gamma", "beta")?,
            head: pair("head", "weight", "bias")?,
            crf: params.index_of("crf.transitions"),
        })
    }
}

/// Encoder weights plus the tagset they predict.
///
/// After quantization, fully-connected weights in `params` hold their
/// dequantized values and the integer copies drive inference.
#[derive(Clone, Debug)]
pub struct Model {
    config: EncoderConfig,
    scheme: LabelScheme,
    params: ParamSet<f32>,
    layout: Layout,
    quantized: Option<BTreeMap<String, QuantizedLinear>>,
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: EncoderConfig, scheme: LabelScheme, with_crf: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.num_tags != scheme.num_tags() {
            return Err(Error::Config(format!(
                "num_tags {} does not match the {}-tag scheme",
                config.num_tags,
                scheme.num_tags()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_scale = 1.0 / (2.0 * config.num_layers.max(1) as f64).sqrt();
        let mut params = ParamSet::new();
        for (name, shape) in param_specs(&config, with_crf) {
            let n: usize = shape.iter().product();
            let std = if name.starts_with("embeddings.") {
                0.02
            } else if name.ends_with(".weight") {
                let fan_in = shape[0] as f64;
                let base = 1.0 / fan_in.sqrt();
                if name.ends_with("attn.o.weight") || name.ends_with("ffn.down.weight") {
                    base * out_scale
                } else {
                    base
                }
            } else {
                0.0
            };
            let data: Vec<f32> = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            } else {
                vec![0.0; n]
            };
            let mut t = Tensor::new(shape, data)?;
            if name == "crf.transitions" {
                crf::enforce_sentinels(t.data_mut(), config.num_tags);
            }
            params.push(name, t);
        }
        Self::from_params(config, scheme, params, None)
    }

    pub(crate) fn from_params(
        config: EncoderConfig,
        scheme: LabelScheme,
        params: ParamSet<f32>,
        quantized: Option<BTreeMap<String, QuantizedLinear>>,
    ) -> Result<Self> {
        config.validate()?;
        let with_crf = params.index_of("crf.transitions").is_some();
        let specs = param_specs(&config, with_crf);
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape) in &specs {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if t.shape() != &shape[..] {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let layout = Layout::build(&params, &config)?;
        Ok(Self {
            config,
            scheme,
            params,
            layout,
            quantized,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    /// Mutable weights for the optimizer.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet<f32>> {
        if self.quantized.is_some() {
            return Err(Error::AlreadyQuantized);
        }
        Ok(&mut self.params)
    }

    pub fn has_crf(&self) -> bool {
        self.layout.crf.is_some()
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized.is_some()
    }

    pub(crate) fn quantized_layers(&self) -> Option<&BTreeMap<String, QuantizedLinear>> {
        self.quantized.as_ref()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn crf_index(&self) -> Option<usize> {
        self.layout.crf
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Learned transition scores, if the model has a CRF layer.
    pub fn transitions(&self) -> Result<Option<TransitionMatrix<f32>>> {
        self.layout
            .crf
            .map(|i| TransitionMatrix::from_tensor(self.params.tensor(i).clone()))
            .transpose()
    }

    /// Tags for every position: Viterbi with a CRF, argmax otherwise.
    /// Positions with `attention_mask == 0` get tag 0.
    pub fn predict(&self, ex: &TokenizedExample) -> Result<Vec<usize>> {
        let logits = self.emissions(&ex.token_ids, &ex.attention_mask)?;
        let mask: Vec<bool> = ex.attention_mask.iter().map(|&m| m != 0).collect();
        decode(&logits, &mask, self.transitions()?.as_ref())
    }

    /// Word-level predictions from the first subword of each word.
    pub fn predict_words(&self, ex: &TokenizedExample) -> Result<Vec<usize>> {
        let tags = self.predict(ex)?;
        Ok(ex.first_subwords().into_iter().map(|i| tags[i]).collect())
    }
}

/// Viterbi over live positions, or per-row argmax without transitions.
pub fn decode(logits: &Tensor<f32>, mask: &[bool], trans: Option<&TransitionMatrix<f32>>) -> Result<Vec<usize>> {
    match trans {
        Some(t) => {
            let view = EmissionView::from_tensor(logits, mask)?;
            Ok(crf::viterbi(&view, t)?.tags)
        }
        None => {
            let (n, k) = logits.dims2()?;
            Ok((0..n)
                .map(|i| {
                    if !mask[i] {
                        return 0;
                    }
                    let row = logits.row(i);
                    (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect())
        }
    }
}
