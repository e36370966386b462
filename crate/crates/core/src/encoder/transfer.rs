use super::{param_specs, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// 1-based teacher layers for an `m`-layer student of an `l`-layer teacher.
///
/// First and last layers are always kept and the rest sit at even spacing,
/// rounded up: `1 + ceil(k (l − 1) / (m − 1))`. A one-layer student takes the
/// first layer.
pub fn default_layer_indices(l: usize, m: usize) -> Result<Vec<usize>> {
    if m > l {
        return Err(Error::Transfer(format!("cannot pick {m} of {l} teacher layers")));
    }
    Ok(match m {
        0 => Vec::new(),
        1 => vec![1],
        _ => (0..m).map(|k| 1 + (k * (l - 1)).div_ceil(m - 1)).collect(),
    })
}

/// New float model whose block `k` is a copy of teacher block `layer_indices[k]`.
///
/// Embeddings, final norm and head are copied too. The student gets a CRF
/// layer iff `with_crf`; its transitions come from the teacher when it has one.
pub fn init_student_from_teacher(
    teacher: &Model,
    student: &EncoderConfig,
    layer_indices: &[usize],
    with_crf: bool,
) -> Result<Model> {
    let t = teacher.config();
    if teacher.is_quantized() {
        return Err(Error::Transfer("cannot transfer from a quantized model".into()));
    }
    for (what, a, b) in [
        ("hidden_dim", t.hidden_dim, student.hidden_dim),
        ("num_heads", t.num_heads, student.num_heads),
        ("ffn_dim", t.ffn_dim, student.ffn_dim),
        ("vocab_size", t.vocab_size, student.vocab_size),
        ("max_seq_len", t.max_seq_len, student.max_seq_len),
        ("num_tags", t.num_tags, student.num_tags),
    ] {
        if a != b {
            return Err(Error::Transfer(format!("{what} differs: teacher {a}, student {b}")));
        }
    }
    if layer_indices.len() != student.num_layers {
        return Err(Error::Transfer(format!(
            "{} layer indices for a {}-layer student",
            layer_indices.len(),
            student.num_layers
        )));
    }
    if layer_indices.iter().any(|&i| i == 0 || i > t.num_layers) || layer_indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Transfer(format!(
            "layer indices {layer_indices:?} must be ascending within 1..={}",
            t.num_layers
        )));
    }
    let tp = teacher.params();
    let mut params = ParamSet::new();
    for (name, shape) in param_specs(student, with_crf) {
        let tensor = if let Some(rest) = name.strip_prefix("blocks.") {
            let (k, tail) = rest.split_once('.').expect("block name");
            let k: usize = k.parse().expect("block index");
            let src = format!("blocks.{}.{tail}", layer_indices[k] - 1);
            tp.get(&src).expect("teacher block").clone()
        } else if name == "crf.transitions" {
            match tp.get(&name) {
                Some(t) => t.clone(),
                None => {
                    let mut z = Tensor::zeros(&shape);
                    crate::crf::enforce_sentinels(z.data_mut(), student.num_tags);
                    z
                }
            }
        } else {
            tp.get(&name).expect("shared tensor").clone()
        };
        params.push(name, tensor);
    }
    Model::from_params(student.clone(), teacher.scheme().clone(), params, None)
}

/// The first `k` blocks of `model` followed by its own final norm and head.
pub fn truncate(model: &Model, k: usize) -> Result<Model> {
    let l = model.config().num_layers;
    if k == 0 || k > l {
        return Err(Error::Config(format!("truncation depth {k} outside 1..={l}")));
    }
    let mut cfg = model.config().clone();
    cfg.num_layers = k;
    let keep = |name: &str| match name.strip_prefix("blocks.") {
        Some(rest) => rest
            .split_once('.')
            .and_then(|(i, _)| i.parse::<usize>().ok())
            .is_some_and(|i| i < k),
        None => true,
    };
    let mut params = ParamSet::new();
    for (name, t) in model.params().iter() {
        if keep(name) {
            params.push(name, t.clone());
        }
    }
    let quantized = model.quantized_layers().map(|m| {
        m.iter()
            .filter(|(p, _)| keep(p))
            .map(|(p, q)| (p.clone(), q.clone()))
            .collect()
    });
    Model::from_params(cfg, model.scheme().clone(), params, quantized)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;

    #[test]
    fn default_indices() {
        assert_eq!(default_layer_indices(12, 4).unwrap(), vec![1, 5, 9, 12]);
        assert_eq!(default_layer_indices(8, 2).unwrap(), vec![1, 8]);
        assert_eq!(default_layer_indices(4, 2).unwrap(), vec![1, 4]);
        assert_eq!(default_layer_indices(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(default_layer_indices(6, 1).unwrap(), vec![1]);
        assert!(default_layer_indices(2, 3).is_err());
    }

    #[test]
    fn blocks_are_copied_from_selected_layers() {
        let t = tiny(3, true);
        let mut cfg = t.config().clone();
        cfg.num_layers = 2;
        let s = init_student_from_teacher(&t, &cfg, &[1, 3], false).unwrap();
        assert!(!s.has_crf());
        assert_eq!(
            s.params().get("blocks.1.ffn.up.weight").unwrap(),
            t.params().get("blocks.2.ffn.up.weight").unwrap()
        );
        assert_eq!(s.params().get("head.weight"), t.params().get("head.weight"));
        assert!(init_student_from_teacher(&t, &cfg, &[3, 1], false).is_err());
        assert!(init_student_from_teacher(&t, &cfg, &[1], false).is_err());
        cfg.hidden_dim = 4;
        cfg.num_heads = 1;
        assert!(matches!(
            init_student_from_teacher(&t, &cfg, &[1, 2], false),
            Err(Error::Transfer(_))
        ));
    }

    #[test]
    fn identity_transfer_preserves_logits() {
        let t = tiny(2, true);
        let s = init_student_from_teacher(&t, t.config(), &[1, 2], true).unwrap();
        let ids = [1, 2, 3, 4];
        let mask = [1u8; 4];
        assert_eq!(t.emissions(&ids, &mask).unwrap(), s.emissions(&ids, &mask).unwrap());
    }

    #[test]
    fn truncation() {
        let m = tiny(3, true);
        let full = truncate(&m, 3).unwrap();
        let ids = [5, 6, 7];
        let mask = [1u8; 3];
        assert_eq!(full.emissions(&ids, &mask).unwrap(), m.emissions(&ids, &mask).unwrap());
        let one = truncate(&m, 1).unwrap();
        assert_eq!(one.config().num_layers, 1);
        assert_eq!(one.params().get("head.weight"), m.params().get("head.weight"));
        assert!(truncate(&m, 0).is_err());
        assert!(truncate(&m, 4).is_err());
    }
}
