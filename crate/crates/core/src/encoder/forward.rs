use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Layout, Model};
use crate::corpus::TokenizedExample;
use crate::error::{Error, Result};
use crate::numerics::{gelu, kernels, Graph, Real, Tensor, Var, LAYER_NORM_EPS};

/// Sentences packed row-wise into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    pub key_valid: Vec<bool>,
    /// Gold tag per row; `None` for specials and padding.
    pub gold: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(examples: &[&TokenizedExample]) -> Self {
        let rows: usize = examples.iter().map(|e| e.len()).sum();
        let mut b = Batch {
            ids: Vec::with_capacity(rows),
            positions: Vec::with_capacity(rows),
            segments: Vec::with_capacity(examples.len()),
            key_valid: Vec::with_capacity(rows),
            gold: Vec::with_capacity(rows),
        };
        for ex in examples {
            b.segments.push((b.ids.len(), ex.len()));
            b.ids.extend_from_slice(&ex.token_ids);
            b.positions.extend(0..ex.len());
            b.key_valid.extend(ex.attention_mask.iter().map(|&m| m != 0));
            b.gold.extend(
                ex.tag_ids
                    .iter()
                    .zip(&ex.attention_mask)
                    .map(|(&t, &m)| (t >= 0 && m != 0).then_some(t as usize)),
            );
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

impl Model {
    fn check_input(&self, ids: &[usize], positions: impl Iterator<Item = usize>) -> Result<()> {
        let cfg = self.config();
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
        }
        if let Some(p) = positions.max() {
            if p >= cfg.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    p + 1,
                    cfg.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns `[rows × num_tags]` logits.
    ///
    /// `g` must borrow a parameter set with this model's layout (for example
    /// [`Model::params`] or a cast of it). Dropout is applied only when `rng`
    /// is given.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_input(&batch.ids, batch.positions.iter().copied())?;
        let cfg = self.config();
        let lay: &Layout = self.layout();
        let p = cfg.dropout;
        let mut drop = |g: &mut Graph<'_, T>, x: Var| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let keep = T::of(1.0 / (1.0 - p));
                    let mask = (0..g.value(x).len())
                        .map(|_| if r.random::<f64>() < p { T::zero() } else { keep })
                        .collect();
                    g.dropout(x, mask)
                }
                _ => Ok(x),
            }
        };
        let eps = T::of(LAYER_NORM_EPS);
        let linear = |g: &mut Graph<'_, T>, x: Var, (w, b): (usize, usize)| -> Result<Var> {
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.matmul(x, wv)?;
            g.add_bias(y, bv)
        };
        let norm = |g: &mut Graph<'_, T>, x: Var, (ga, be): (usize, usize)| -> Result<Var> {
            let (gv, bv) = (g.param(ga), g.param(be));
            g.layer_norm(x, gv, bv, eps)
        };

        let tok = g.param(lay.token);
        let pos = g.param(lay.position);
        let te = g.gather(tok, &batch.ids)?;
        let pe = g.gather(pos, &batch.positions)?;
        let mut x = g.add(te, pe)?;
        x = drop(g, x)?;
        for blk in &lay.blocks {
            let h = norm(g, x, blk.attn_norm)?;
            let q = linear(g, h, blk.proj[0])?;
            let k = linear(g, h, blk.proj[1])?;
            let v = linear(g, h, blk.proj[2])?;
            let a = g.attention(q, k, v, cfg.num_heads, &batch.segments, &batch.key_valid)?;
            let o = linear(g, a, blk.proj[3])?;
            let o = drop(g, o)?;
            x = g.add(x, o)?;
            let h = norm(g, x, blk.ffn_norm)?;
            let u = linear(g, h, blk.up)?;
            let u = g.gelu(u);
            let dn = linear(g, u, blk.down)?;
            let dn = drop(g, dn)?;
            x = g.add(x, dn)?;
        }
        let h = norm(g, x, lay.final_norm)?;
        linear(g, h, lay.head)
    }

    fn linear_infer(&self, x: &[f32], rows: usize, (w, b): (usize, usize)) -> Result<Vec<f32>> {
        let params = self.params();
        if let Some(q) = self
            .quantized_layers()
            .and_then(|m| params.name(w).strip_suffix(".weight").and_then(|prefix| m.get(prefix)))
        {
            let t = Tensor::new(vec![rows, q.in_features()], x.to_vec())?;
            return Ok(q.forward(&t)?.into_data());
        }
        let wt = params.tensor(w);
        let (k, n) = wt.dims2()?;
        let mut y = vec![0.0f32; rows * n];
        kernels::matmul(x, wt.data(), &mut y, rows, k, n);
        kernels::add_bias(&mut y, params.tensor(b).data());
        Ok(y)
    }

    /// Emission logits `[len × num_tags]` for one sentence, without dropout.
    ///
    /// Positions with `mask == 0` act as padding: they are never attended to.
    pub fn emissions(&self, ids: &[usize], mask: &[u8]) -> Result<Tensor<f32>> {
        if ids.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} ids with {} mask entries",
                ids.len(),
                mask.len()
            )));
        }
        self.check_input(ids, 0..ids.len())?;
        let cfg = self.config();
        let lay = self.layout();
        let params = self.params();
        let n = ids.len();
        let d = cfg.hidden_dim;
        let tok = params.tensor(lay.token).data();
        let pos = params.tensor(lay.position).data();
        let mut x = Vec::with_capacity(n * d);
        for (i, &id) in ids.iter().enumerate() {
            x.extend(
                tok[id * d..(id + 1) * d]
                    .iter()
                    .zip(&pos[i * d..(i + 1) * d])
                    .map(|(a, b)| a + b),
            );
        }
        let valid: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
        let seg = [(0, n)];
        let eps = LAYER_NORM_EPS as f32;
        let norm = |x: &[f32], (g, b): (usize, usize)| {
            kernels::layer_norm(x, params.tensor(g).data(), params.tensor(b).data(), eps, None)
        };
        for blk in &lay.blocks {
            let h = norm(&x, blk.attn_norm);
            let q = self.linear_infer(&h, n, blk.proj[0])?;
            let k = self.linear_infer(&h, n, blk.proj[1])?;
            let v = self.linear_infer(&h, n, blk.proj[2])?;
            let a = kernels::attention(&q, &k, &v, d, cfg.num_heads, &seg, &valid, None);
            let o = self.linear_infer(&a, n, blk.proj[3])?;
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = norm(&x, blk.ffn_norm);
            let mut u = self.linear_infer(&h, n, blk.up)?;
            u.iter_mut().for_each(|v| *v = gelu(*v));
            let dn = self.linear_infer(&u, n, blk.down)?;
            x.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
        }
        let h = norm(&x, lay.final_norm);
        let logits = self.linear_infer(&h, n, lay.head)?;
        Tensor::new(vec![n, cfg.num_tags], logits)
    }
}
