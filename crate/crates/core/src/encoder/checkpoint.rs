use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{linear_prefixes, param_specs, EncoderConfig, Model};
use crate::corpus::LabelScheme;
use crate::error::{CorruptKind, Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::quant::{QuantizedLinear, QuantizedTensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRFKDCK1";

const F32: &str = "f32";
const I8: &str = "i8+scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
    nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    creator: String,
    precision: String,
    config: EncoderConfig,
    scheme: LabelScheme,
    crf: bool,
    tensors: Vec<TensorRecord>,
}

fn encode(model: &Model) -> Result<Vec<u8>> {
    let quant = model.quantized_layers();
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.params().iter() {
        let q = quant.and_then(|m| name.strip_suffix(".weight").and_then(|p| m.get(p)));
        let offset = payload.len() as u64;
        let (dtype, scale) = match q {
            Some(lin) => {
                let w = lin.weight();
                payload.extend(w.values().iter().map(|&v| v as u8));
                (I8, Some(w.scale()))
            }
            None => {
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                (F32, None)
            }
        };
        records.push(TensorRecord {
            name: name.to_string(),
            dtype: dtype.to_string(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
            scale,
        });
    }
    let header = Header {
        creator: format!("crfkd {}", env!("CARGO_PKG_VERSION")),
        precision: if quant.is_some() { "int8-dynamic" } else { "f32" }.to_string(),
        config: model.config().clone(),
        scheme: model.scheme().clone(),
        crf: model.has_crf(),
        tensors: records,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Serializes a model. Output is a pure function of the weights.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

/// Bytes of a serialized checkpoint, split into header and per-dtype payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StorageBreakdown {
    pub header: u64,
    pub f32_payload: u64,
    pub int8_payload: u64,
    /// Float size the int8 tensors would occupy at 4 bytes per value.
    pub int8_as_f32: u64,
}

impl Model {
    pub fn storage(&self) -> Result<StorageBreakdown> {
        let bytes = encode(self)?;
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen as usize])?;
        let mut s = StorageBreakdown {
            header: 16 + hlen,
            ..Default::default()
        };
        for r in &header.tensors {
            if r.dtype == I8 {
                s.int8_payload += r.nbytes;
                s.int8_as_f32 += 4 * r.nbytes;
            } else {
                s.f32_payload += r.nbytes;
            }
        }
        Ok(s)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|kind| Error::corrupt(path, kind))
}

fn decode(bytes: &[u8]) -> std::result::Result<Model, CorruptKind> {
    if bytes.len() < 8 {
        return Err(CorruptKind::Truncated);
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CorruptKind::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CorruptKind::Truncated);
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or(CorruptKind::Truncated)?;
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| CorruptKind::Header(e.to_string()))?;
    let payload = &bytes[body..];

    let by_name: BTreeMap<&str, &TensorRecord> = header.tensors.iter().map(|r| (r.name.as_str(), r)).collect();
    if by_name.len() != header.tensors.len() {
        return Err(CorruptKind::Header("duplicate tensor name".into()));
    }
    let specs = param_specs(&header.config, header.crf);
    if header.tensors.len() != specs.len() {
        if let Some((name, _)) = specs.iter().find(|(n, _)| !by_name.contains_key(n.as_str())) {
            return Err(CorruptKind::MissingTensor(name.clone()));
        }
        return Err(CorruptKind::Header(format!(
            "{} tensors listed, {} expected",
            header.tensors.len(),
            specs.len()
        )));
    }
    let quantizable: Vec<String> = linear_prefixes(&header.config)
        .into_iter()
        .map(|p| p + ".weight")
        .collect();
    let mut params = ParamSet::new();
    let mut quantized = BTreeMap::new();
    let mut pending_q: Vec<(String, QuantizedTensor)> = Vec::new();
    for (name, shape) in &specs {
        let r = by_name
            .get(name.as_str())
            .ok_or_else(|| CorruptKind::MissingTensor(name.clone()))?;
        if &r.shape != shape {
            return Err(CorruptKind::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: r.shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        let start = r.offset as usize;
        let end = start.checked_add(r.nbytes as usize).ok_or(CorruptKind::Truncated)?;
        if end > payload.len() {
            return Err(CorruptKind::Truncated);
        }
        let raw = &payload[start..end];
        match r.dtype.as_str() {
            F32 => {
                if raw.len() != 4 * n {
                    return Err(CorruptKind::Header(format!("`{name}` payload size {}", raw.len())));
                }
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                params.push(name.clone(), Tensor::new(shape.clone(), data).expect("size checked"));
            }
            I8 => {
                if !quantizable.contains(name) || raw.len() != n {
                    return Err(CorruptKind::Dtype(format!("{I8} for `{name}`")));
                }
                let scale = r
                    .scale
                    .ok_or_else(|| CorruptKind::Header(format!("`{name}` lacks a scale")))?;
                let values = raw.iter().map(|&b| b as i8).collect();
                let q = QuantizedTensor::from_parts(shape.clone(), values, scale)
                    .map_err(|e| CorruptKind::Header(e.to_string()))?;
                params.push(name.clone(), q.dequantize());
                pending_q.push((name.clone(), q));
            }
            other => return Err(CorruptKind::Dtype(other.to_string())),
        }
    }
    for (name, q) in pending_q {
        let prefix = name.strip_suffix(".weight").expect("weight name");
        let bias = params.get(&format!("{prefix}.bias")).expect("bias spec");
        let lin = QuantizedLinear::from_quantized(&q, bias).map_err(|e| CorruptKind::Header(e.to_string()))?;
        quantized.insert(prefix.to_string(), lin);
    }
    let quantized = (!quantized.is_empty()).then_some(quantized);
    Model::from_params(header.config, header.scheme, params, quantized).map_err(|e| CorruptKind::Header(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny(2, true);
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        let ids = [1, 2, 3];
        assert_eq!(
            back.emissions(&ids, &[1; 3]).unwrap(),
            m.emissions(&ids, &[1; 3]).unwrap()
        );
        let p2 = dir.path().join("m2.ckpt");
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(1, false), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let kind = |b: &[u8]| match decode(b) {
            Err(k) => k,
            Ok(_) => panic!("decoded corrupt bytes"),
        };
        assert_eq!(kind(&bytes[..bytes.len() - 3]), CorruptKind::Truncated);
        assert_eq!(kind(&bytes[..5]), CorruptKind::Truncated);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(kind(&bad), CorruptKind::BadMagic);
        let mut bad = bytes.clone();
        bad[17] = b'#';
        assert!(matches!(kind(&bad), CorruptKind::Header(_)));

        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        let rebuild = |h: String| {
            let mut out = bytes[..8].to_vec();
            out.extend_from_slice(&(h.len() as u64).to_le_bytes());
            out.extend_from_slice(h.as_bytes());
            out.extend_from_slice(&bytes[16 + hlen..]);
            out
        };
        let renamed = rebuild(header.replacen("\"head.bias\"", "\"head.other\"", 1));
        assert_eq!(kind(&renamed), CorruptKind::MissingTensor("head.bias".into()));
        let reshaped = rebuild(header.replacen("\"shape\":[5]", "\"shape\":[6]", 1));
        assert!(matches!(kind(&reshaped), CorruptKind::ShapeMismatch { .. }));

        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Corrupt { .. })));
    }
}
