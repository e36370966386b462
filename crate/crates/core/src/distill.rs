//! Temperature-softened distillation from teacher emission logits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CorruptKind, Error, Result};
use crate::numerics::{log_softmax, softmax, Graph, Real, Tensor, Var};

/// Floor applied to student probabilities inside the KL logarithm.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    /// Weight of the hard cross-entropy term.
    pub alpha: f64,
    pub tau: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { alpha: 0.5, tau: 4.0 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Row-wise `softmax(logits / tau)`.
pub fn soften<T: Real>(logits: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let inv = T::of(1.0 / tau);
    softmax(&logits.map(|v| v * inv), 1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KlStats {
    pub tokens: usize,
    /// Entries where the student probability fell below [`KL_EPS`].
    pub clamped: usize,
}

/// Sum over valid rows of `Σ_k p_t log(p_t / p_s)`.
pub fn kl_term<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>, valid: &[bool]) -> Result<(T, KlStats)> {
    let (n, k) = teacher.dims2()?;
    if student.shape() != teacher.shape() || valid.len() != n {
        return Err(Error::Shape(format!(
            "kl_term: teacher {:?}, student {:?}, mask {}",
            teacher.shape(),
            student.shape(),
            valid.len()
        )));
    }
    let eps = T::of(KL_EPS);
    let mut stats = KlStats::default();
    let mut total = T::zero();
    for i in (0..n).filter(|&i| valid[i]) {
        stats.tokens += 1;
        for j in 0..k {
            let pt = teacher.at(i, j);
            if pt <= T::zero() {
                continue;
            }
            let mut ps = student.at(i, j);
            if ps < eps {
                ps = eps;
                stats.clamped += 1;
            }
            total += pt * (pt.ln() - ps.ln());
        }
    }
    Ok((total, stats))
}

/// Loss value, its parts and the gradient with respect to the student logits.
#[derive(Clone, Debug, PartialEq)]
pub struct KdOutput<T = f32> {
    pub loss: T,
    /// Mean hard cross-entropy at temperature one.
    pub ce: T,
    /// Mean KL between softened distributions, before the `tau²` factor.
    pub kl: T,
    /// `tau² · kl`.
    pub soft: T,
    pub tokens: usize,
    pub clamped: usize,
    pub grad: Tensor<T>,
}

/// `alpha · CE + (1 − alpha) · tau² · KL`, both averaged over labelled rows.
///
/// Rows with `gold = None` contribute to neither term. Teacher logits are
/// treated as constants.
pub fn kd_loss<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    gold: &[Option<usize>],
    cfg: &KdConfig,
) -> Result<KdOutput<T>> {
    cfg.validate()?;
    let (n, k) = student.dims2()?;
    if teacher.shape() != student.shape() || gold.len() != n {
        return Err(Error::Shape(format!(
            "kd_loss: student {:?}, teacher {:?}, gold {}",
            student.shape(),
            teacher.shape(),
            gold.len()
        )));
    }
    if let Some(&Some(t)) = gold.iter().find(|g| g.is_some_and(|t| t >= k)) {
        return Err(Error::Input(format!("gold tag {t} outside {k} classes")));
    }
    let valid: Vec<bool> = gold.iter().map(Option::is_some).collect();
    let count = valid.iter().filter(|&&v| v).count();
    let lp = log_softmax(student, 1)?;
    let ps_tau = soften(student, cfg.tau)?;
    let pt_tau = soften(teacher, cfg.tau)?;
    let (kl_sum, stats) = kl_term(&pt_tau, &ps_tau, &valid)?;

    let alpha = T::of(cfg.alpha);
    let tau = T::of(cfg.tau);
    let inv = if count == 0 {
        T::zero()
    } else {
        T::one() / T::of(count as f64)
    };
    let mut ce = T::zero();
    let mut grad = vec![T::zero(); n * k];
    let hard = alpha * inv;
    let softw = (T::one() - alpha) * tau * inv;
    for (i, g) in gold.iter().enumerate() {
        let Some(y) = *g else { continue };
        ce -= lp.at(i, y);
        let row = &mut grad[i * k..(i + 1) * k];
        for (j, d) in row.iter_mut().enumerate() {
            let p = lp.at(i, j).exp();
            let onehot = if j == y { T::one() } else { T::zero() };
            *d = hard * (p - onehot) + softw * (ps_tau.at(i, j) - pt_tau.at(i, j));
        }
    }
    let ce = ce * inv;
    let kl = kl_sum * inv;
    let soft = tau * tau * kl;
    Ok(KdOutput {
        loss: alpha * ce + (T::one() - alpha) * soft,
        ce,
        kl,
        soft,
        tokens: count,
        clamped: stats.clamped,
        grad: Tensor::new(vec![n, k], grad)?,
    })
}

/// Records [`kd_loss`] on the tape; returns the loss node and the parts.
pub fn kd_loss_node<T: Real>(
    g: &mut Graph<'_, T>,
    student: Var,
    teacher: &Tensor<T>,
    gold: &[Option<usize>],
    cfg: &KdConfig,
) -> Result<(Var, KdOutput<T>)> {
    let mut out = kd_loss(g.value(student), teacher, gold, cfg)?;
    let grad = std::mem::replace(&mut out.grad, Tensor::zeros(&[0]));
    let v = g.fused_scalar(out.loss, vec![student], vec![grad])?;
    Ok((v, out))
}

const CACHE_MAGIC: &[u8; 8] = b"CRFKDLG1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    num_tags: usize,
    count: usize,
    teacher: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    example: usize,
    rows: usize,
    offset: u64,
    nbytes: u64,
    tokens: String,
}

/// Frozen teacher logits, one `[len × K]` matrix per example.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitCache {
    pub num_tags: usize,
    /// Identifies the teacher checkpoint the logits came from.
    pub teacher: String,
    pub logits: Vec<Tensor<f32>>,
    /// Digest of each example's token ids; loading checks it against the data.
    pub fingerprints: Vec<String>,
}

pub fn token_fingerprint(ids: &[usize]) -> String {
    let mut h = Sha256::new();
    for &id in ids {
        h.update((id as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn cache_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("jsonl"), path.with_extension("bin"))
}

impl LogitCache {
    /// Writes `<path>.jsonl` (index) and `<path>.bin` (payload).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (index_path, bin_path) = cache_paths(path);
        let mut bin = BufWriter::new(File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
        let mut index = BufWriter::new(File::create(&index_path).map_err(|e| Error::io(&index_path, e))?);
        let bio = |e| Error::io(&bin_path, e);
        let iio = |e| Error::io(&index_path, e);
        let header = CacheHeader {
            format: "crfkd-logits".into(),
            num_tags: self.num_tags,
            count: self.logits.len(),
            teacher: self.teacher.clone(),
        };
        serde_json::to_writer(&mut index, &header)?;
        index.write_all(b"\n").map_err(iio)?;
        bin.write_all(CACHE_MAGIC).map_err(bio)?;
        let mut offset = CACHE_MAGIC.len() as u64;
        for (i, (t, fp)) in self.logits.iter().zip(&self.fingerprints).enumerate() {
            let (rows, k) = t.dims2()?;
            if k != self.num_tags {
                return Err(Error::Shape(format!("cached logits for example {i} have {k} columns")));
            }
            for v in t.data() {
                bin.write_all(&v.to_le_bytes()).map_err(bio)?;
            }
            let nbytes = (t.len() * 4) as u64;
            let entry = CacheEntry {
                example: i,
                rows,
                offset,
                nbytes,
                tokens: fp.clone(),
            };
            serde_json::to_writer(&mut index, &entry)?;
            index.write_all(b"\n").map_err(iio)?;
            offset += nbytes;
        }
        bin.flush().map_err(bio)?;
        index.flush().map_err(iio)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (index_path, bin_path) = cache_paths(path);
        let corrupt = |p: &Path, kind| Error::corrupt(p, kind);
        let index = BufReader::new(File::open(&index_path).map_err(|e| Error::io(&index_path, e))?);
        let mut lines = index.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| corrupt(&index_path, CorruptKind::Truncated))?
            .map_err(|e| Error::io(&index_path, e))?;
        let header: CacheHeader =
            serde_json::from_str(&header_line).map_err(|e| corrupt(&index_path, CorruptKind::Header(e.to_string())))?;
        let mut payload = Vec::new();
        File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut payload))
            .map_err(|e| Error::io(&bin_path, e))?;
        if payload.len() < CACHE_MAGIC.len() || &payload[..8] != CACHE_MAGIC {
            return Err(corrupt(&bin_path, CorruptKind::BadMagic));
        }
        let mut logits = Vec::with_capacity(header.count);
        let mut fingerprints = Vec::with_capacity(header.count);
        for line in lines {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            let e: CacheEntry = serde_json::from_str(&line)
                .map_err(|err| corrupt(&index_path, CorruptKind::Header(err.to_string())))?;
            if e.example != logits.len() || e.nbytes != (e.rows * header.num_tags * 4) as u64 {
                return Err(corrupt(
                    &index_path,
                    CorruptKind::Header(format!("bad entry for example {}", e.example)),
                ));
            }
            let (a, b) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if b > payload.len() {
                return Err(corrupt(&bin_path, CorruptKind::Truncated));
            }
            let data: Vec<f32> = payload[a..b]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            logits.push(Tensor::new(vec![e.rows, header.num_tags], data)?);
            fingerprints.push(e.tokens);
        }
        if logits.len() != header.count {
            return Err(corrupt(&index_path, CorruptKind::Truncated));
        }
        Ok(Self {
            num_tags: header.num_tags,
            teacher: header.teacher,
            logits,
            fingerprints,
        })
    }

    /// Checks that entry `i` was produced for this token sequence.
    pub fn check(&self, i: usize, ids: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .logits
            .get(i)
            .ok_or_else(|| Error::Input(format!("logit cache has no entry {i}")))?;
        if self.fingerprints[i] != token_fingerprint(ids) || t.shape()[0] != ids.len() {
            return Err(Error::Input(format!(
                "logit cache entry {i} does not match the training data"
            )));
        }
        Ok(t)
    }
}
