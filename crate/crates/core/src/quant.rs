//! Symmetric per-tensor INT8 quantization and an i32-accumulating matmul.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{linear_prefixes, Model};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Largest inner dimension for which an i32 accumulator cannot overflow:
/// `65536 · 127² < 2³¹`.
pub const MAX_INNER_DIM: usize = 1 << 16;

/// INT8 values with one scale: `real ≈ scale · value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: f64,
}

impl QuantizedTensor {
    pub fn from_parts(shape: Vec<usize>, values: Vec<i8>, scale: f64) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "{} int8 values for shape {shape:?}",
                values.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Input(format!("quantization scale {scale} must be positive")));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::Input("int8 value -128 outside the symmetric range".into()));
        }
        Ok(Self { shape, values, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self.values.iter().map(|&q| (self.scale * q as f64) as f32).collect();
        Tensor::new(self.shape.clone(), data).expect("shape checked")
    }

    /// Dequantized values without the final f32 rounding.
    pub fn dequantize_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&q| self.scale * q as f64).collect()
    }

    /// Row-major transpose of a 2-D tensor.
    pub fn transposed(&self) -> Result<Self> {
        let [r, c] = self.shape[..] else {
            return Err(Error::Shape(format!("transpose needs 2-D, got {:?}", self.shape)));
        };
        let mut values = vec![0i8; self.values.len()];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = self.values[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            values,
            scale: self.scale,
        })
    }
}

/// `q = round(w · 127 / max|w|)` with `scale = max|w| / 127`, halves rounded
/// away from zero. An all-zero tensor gets scale 1.
pub fn quantize_slice(data: &[f32]) -> (Vec<i8>, f64) {
    let max = data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if max == 0.0 {
        return (vec![0; data.len()], 1.0);
    }
    let values = data
        .iter()
        .map(|&v| (v as f64 * 127.0 / max).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (values, max / 127.0)
}

pub fn quantize_tensor(w: &Tensor<f32>) -> Result<QuantizedTensor> {
    w.check_finite("quantize_tensor")?;
    let (values, scale) = quantize_slice(w.data());
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        values,
        scale,
    })
}

/// Same rule as [`quantize_tensor`], using the runtime range of `x`.
pub fn quantize_activations(x: &Tensor<f32>) -> Result<QuantizedTensor> {
    quantize_tensor(x)
}

fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    let mut acc = [0i32; 8];
    let (ca, ra) = a.as_chunks::<8>();
    let (cb, rb) = b.as_chunks::<8>();
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l].wrapping_add(x[l] as i32 * y[l] as i32);
        }
    }
    let mut s = acc.iter().fold(0i32, |s, &v| s.wrapping_add(v));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s.wrapping_add(x as i32 * y as i32);
    }
    s
}

fn gemm_nt_i8_portable(a: &[i8], b: &[i8], k: usize, n: usize, out: &mut [i32]) {
    for (row, o) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (j, v) in o.iter_mut().enumerate() {
            *v = dot_i8(row, &b[j * k..(j + 1) * k]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nt_i8_avx2(a: &[i8], b: &[i8], k: usize, n: usize, out: &mut [i32]) {
    use std::arch::x86_64::*;

    #[inline(always)]
    unsafe fn hsum(v: __m256i) -> i32 {
        let s = _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256::<1>(v));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32::<0b01_00_11_10>(s));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32::<0b10_11_00_01>(s));
        _mm_cvtsi128_si32(s)
    }
    #[inline(always)]
    unsafe fn widen(p: *const i8) -> __m256i {
        _mm256_cvtepi8_epi16(_mm_loadu_si128(p as *const __m128i))
    }

    let body = k / 16 * 16;
    let tail = |row: &[i8], col: &[i8]| (body..k).fold(0i32, |s, q| s.wrapping_add(row[q] as i32 * col[q] as i32));
    for (row, o) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        let ap = row.as_ptr();
        let mut j = 0;
        while j + 4 <= n {
            let bp = b.as_ptr().add(j * k);
            let mut acc = [_mm256_setzero_si256(); 4];
            let mut p = 0;
            while p < body {
                let av = widen(ap.add(p));
                for (c, acc) in acc.iter_mut().enumerate() {
                    let bv = widen(bp.add(c * k + p));
                    *acc = _mm256_add_epi32(*acc, _mm256_madd_epi16(av, bv));
                }
                p += 16;
            }
            for (c, acc) in acc.iter().enumerate() {
                let col = &b[(j + c) * k..(j + c + 1) * k];
                o[j + c] = hsum(*acc).wrapping_add(tail(row, col));
            }
            j += 4;
        }
        for (jj, v) in o.iter_mut().enumerate().skip(j) {
            *v = dot_i8(row, &b[jj * k..(jj + 1) * k]);
        }
    }
}

/// Integer `a[m×k] · b[n×k]ᵀ` with wrapping i32 accumulation.
pub(crate) fn gemm_nt_i8(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Vec<i32> {
    let mut out = vec![0i32; m * n];
    if k == 0 || n == 0 {
        return out;
    }
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2 and all slices hold at least m·k / n·k values.
        unsafe { gemm_nt_i8_avx2(a, b, k, n, &mut out) };
        return out;
    }
    gemm_nt_i8_portable(a, b, k, n, &mut out);
    out
}

/// `a · bᵀ` where `b` is stored as `[n × k]`; rescaled by both scales.
pub fn qmatmul_nt(a: &QuantizedTensor, b_t: &QuantizedTensor) -> Result<Tensor<f32>> {
    let (&[m, k], &[n, k2]) = (&a.shape[..], &b_t.shape[..]) else {
        return Err(Error::Shape(format!(
            "qmatmul needs 2-D operands, got {:?} and {:?}",
            a.shape, b_t.shape
        )));
    };
    if k != k2 {
        return Err(Error::Shape(format!("qmatmul inner dimensions {k} and {k2} differ")));
    }
    if k > MAX_INNER_DIM {
        return Err(Error::Overflow(k));
    }
    let s = a.scale * b_t.scale;
    let out = gemm_nt_i8(&a.values, &b_t.values, m, k, n);
    Tensor::new(vec![m, n], out.into_iter().map(|v| (v as f64 * s) as f32).collect())
}

/// Integer product of `[m × k]` and `[k × n]` operands.
pub fn qmatmul(a: &QuantizedTensor, w: &QuantizedTensor) -> Result<Tensor<f32>> {
    if w.shape.len() != 2 {
        return Err(Error::Shape(format!("qmatmul needs 2-D operands, got {:?}", w.shape)));
    }
    qmatmul_nt(a, &w.transposed()?)
}

/// Drop-in replacement for a float linear layer `y = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    /// Weight in `[out × in]` layout so each output is a contiguous dot product.
    weight_t: QuantizedTensor,
    bias: Vec<f32>,
}

impl QuantizedLinear {
    /// `weight` is `[in × out]`.
    pub fn from_float(weight: &Tensor<f32>, bias: &Tensor<f32>) -> Result<Self> {
        let q = quantize_tensor(weight)?;
        Self::from_quantized(&q, bias)
    }

    pub fn from_quantized(weight: &QuantizedTensor, bias: &Tensor<f32>) -> Result<Self> {
        let weight_t = weight.transposed()?;
        if bias.len() != weight_t.shape[0] {
            return Err(Error::Shape(format!(
                "bias of {} for {} output features",
                bias.len(),
                weight_t.shape[0]
            )));
        }
        Ok(Self {
            weight_t,
            bias: bias.data().to_vec(),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight_t.shape[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight_t.shape[0]
    }

    /// Weight in the `[in × out]` layout of the float layer it replaced.
    pub fn weight(&self) -> QuantizedTensor {
        self.weight_t.transposed().expect("2-D")
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Quantizes `x` on the fly, multiplies in integers, adds the float bias.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let qx = quantize_activations(x)?;
        let mut y = qmatmul_nt(&qx, &self.weight_t)?;
        let n = self.out_features();
        let data = y.data_mut();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// Parameter and byte counts of a model conversion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantReport {
    pub converted_tensors: usize,
    pub converted_params: usize,
    pub retained_params: usize,
    /// Bytes of the converted tensors before (4 per value) and after (1 per value).
    pub converted_fp32_bytes: usize,
    pub converted_int8_bytes: usize,
}

/// Replaces every fully-connected layer by a [`QuantizedLinear`].
///
/// Embeddings, normalization parameters, biases and CRF transitions stay in
/// f32. The float copies of converted weights are overwritten with their
/// dequantized values.
pub fn quantize_model(model: &Model) -> Result<(Model, QuantReport)> {
    if model.is_quantized() {
        return Err(Error::AlreadyQuantized);
    }
    let mut params = model.params().clone();
    let mut layers = BTreeMap::new();
    let mut report = QuantReport::default();
    for prefix in linear_prefixes(model.config()) {
        let wi = params.index_of(&format!("{prefix}.weight")).expect("weight");
        let bi = params.index_of(&format!("{prefix}.bias")).expect("bias");
        let q = quantize_tensor(params.tensor(wi))?;
        report.converted_tensors += 1;
        report.converted_params += q.len();
        report.converted_fp32_bytes += 4 * q.len();
        report.converted_int8_bytes += q.len();
        params.set(wi, q.dequantize());
        layers.insert(prefix, QuantizedLinear::from_quantized(&q, params.tensor(bi))?);
    }
    report.retained_params = params.numel() - report.converted_params;
    let out = Model::from_params(model.config().clone(), model.scheme().clone(), params, Some(layers))?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn integer_gemm_paths_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (m, k, n) in [(1, 1, 1), (3, 17, 5), (4, 48, 9), (2, 100, 7), (5, 16, 4)] {
            let a: Vec<i8> = (0..m * k).map(|_| rng.random()).collect();
            let b: Vec<i8> = (0..n * k).map(|_| rng.random()).collect();
            let mut want = vec![0; m * n];
            gemm_nt_i8_portable(&a, &b, k, n, &mut want);
            assert_eq!(gemm_nt_i8(&a, &b, m, k, n), want);
            for i in 0..m {
                for j in 0..n {
                    let exact: i64 = (0..k).map(|p| a[i * k + p] as i64 * b[j * k + p] as i64).sum();
                    assert_eq!(want[i * n + j] as i64, exact);
                }
            }
        }
        let k = 140_000;
        let a = vec![-128i8; k];
        let mut want = vec![0];
        gemm_nt_i8_portable(&a, &a, k, 1, &mut want);
        assert_eq!(gemm_nt_i8(&a, &a, 1, k, 1), want);
        assert_eq!(want[0], (16384i64 * k as i64) as i32);
    }

    #[test]
    fn hand_values() {
        let q = quantize_tensor(&Tensor::new(vec![3], vec![1.27, -0.635, 0.0]).unwrap()).unwrap();
        assert_eq!(q.values(), &[127, -64, 0]);
        assert!((q.scale() - 0.01).abs() < 1e-9);
        let q = quantize_tensor(&Tensor::new(vec![1], vec![-2.54]).unwrap()).unwrap();
        assert_eq!(q.values(), &[-127]);
        assert!((q.scale() - 0.02).abs() < 1e-9);
    }

    #[test]
    fn zero_tensor_has_unit_scale() {
        let q = quantize_tensor(&Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(q.scale(), 1.0);
        assert!(q.dequantize().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_activation_is_exact() {
        let x = Tensor::full(&[3, 3], 0.7f32);
        let q = quantize_activations(&x).unwrap();
        assert!(q.values().iter().all(|&v| v == 127));
        assert_eq!(q.dequantize(), x);
        assert_eq!(quantize_activations(&x).unwrap(), q);
    }

    #[test]
    fn integer_inputs_are_exact() {
        let a = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![127.0f32, -3.0, 5.0, 0.0]).unwrap();
        let y = qmatmul(&quantize_tensor(&a).unwrap(), &quantize_tensor(&w).unwrap()).unwrap();
        assert_eq!(y, w);
        let zero = qmatmul(
            &quantize_tensor(&Tensor::zeros(&[2, 2])).unwrap(),
            &quantize_tensor(&w).unwrap(),
        )
        .unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overflow_guard() {
        let a = QuantizedTensor::from_parts(vec![1, MAX_INNER_DIM + 1], vec![1; MAX_INNER_DIM + 1], 1.0).unwrap();
        let b = QuantizedTensor::from_parts(vec![1, MAX_INNER_DIM + 1], vec![1; MAX_INNER_DIM + 1], 1.0).unwrap();
        assert!(matches!(qmatmul_nt(&a, &b), Err(Error::Overflow(_))));
        let a = QuantizedTensor::from_parts(vec![1, MAX_INNER_DIM], vec![127; MAX_INNER_DIM], 1.0).unwrap();
        let b = QuantizedTensor::from_parts(vec![1, MAX_INNER_DIM], vec![-127; MAX_INNER_DIM], 1.0).unwrap();
        let y = qmatmul_nt(&a, &b).unwrap();
        assert_eq!(y.data()[0], -(127.0f32 * 127.0 * MAX_INNER_DIM as f32));
    }

    #[test]
    fn linear_matches_float_layer() {
        let w = Tensor::new(vec![3, 2], vec![0.5f32, -0.25, 0.1, 0.9, -0.7, 0.3]).unwrap();
        let b = Tensor::new(vec![2], vec![0.01f32, -0.02]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.2f32, -0.4, 0.6, 1.0, 0.0, -1.0]).unwrap();
        let lin = QuantizedLinear::from_float(&w, &b).unwrap();
        assert_eq!((lin.in_features(), lin.out_features()), (3, 2));
        assert_eq!(lin.weight(), quantize_tensor(&w).unwrap());
        let mut exact = crate::numerics::matmul(&x, &w).unwrap();
        for r in exact.data_mut().chunks_exact_mut(2) {
            r[0] += 0.01;
            r[1] -= 0.02;
        }
        let y = lin.forward(&x).unwrap();
        assert!(y.max_abs_diff(&exact) < 0.02);
    }

    fn tiny_model() -> Model {
        let cfg = crate::encoder::EncoderConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 30,
            max_seq_len: 12,
            num_tags: 5,
            dropout: 0.0,
        };
        Model::new(cfg, crate::corpus::LabelScheme::new(["A", "B"]).unwrap(), true, 9).unwrap()
    }

    #[test]
    fn model_conversion() {
        let m = tiny_model();
        let (q, rep) = quantize_model(&m).unwrap();
        assert_eq!(q.num_parameters(), m.num_parameters());
        assert_eq!(rep.converted_tensors, 13);
        assert_eq!(rep.converted_params + rep.retained_params, m.num_parameters());
        assert_eq!(rep.converted_fp32_bytes, 4 * rep.converted_int8_bytes);
        assert!(matches!(quantize_model(&q), Err(Error::AlreadyQuantized)));

        let ids = [1, 2, 3, 4, 5];
        let a = m.emissions(&ids, &[1; 5]).unwrap();
        let b = q.emissions(&ids, &[1; 5]).unwrap();
        let range = a.max_abs();
        assert!(a.max_abs_diff(&b) < 0.2 * range);
    }

    #[test]
    fn quantized_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (q, rep) = quantize_model(&tiny_model()).unwrap();
        let path = dir.path().join("q.ckpt");
        crate::encoder::save_checkpoint(&q, &path).unwrap();
        let back = crate::encoder::load_checkpoint(&path).unwrap();
        assert!(back.is_quantized());
        let ids = [3, 1, 4];
        assert_eq!(
            back.emissions(&ids, &[1; 3]).unwrap(),
            q.emissions(&ids, &[1; 3]).unwrap()
        );
        let path2 = dir.path().join("q2.ckpt");
        crate::encoder::save_checkpoint(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        let s = q.storage().unwrap();
        assert_eq!(s.int8_payload as usize, rep.converted_int8_bytes);
        assert_eq!(s.int8_as_f32, 4 * s.int8_payload);
    }
}
