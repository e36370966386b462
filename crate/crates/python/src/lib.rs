//! Python bindings over plain lists: CRF decoding, strict span scores and
//! INT8 tensor quantization.

use std::collections::BTreeMap;

use crfkd::corpus::LabelScheme;
use crfkd::crf::{self, EmissionView, TransitionMatrix};
use crfkd::evalmetrics::Evaluator;
use crfkd::numerics::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: crfkd::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flatten(rows: &[Vec<f64>], what: &str) -> PyResult<(usize, usize, Vec<f64>)> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what} rows differ in length")));
    }
    Ok((rows.len(), cols, rows.concat()))
}

struct Problem {
    k: usize,
    emissions: Vec<f64>,
    mask: Vec<bool>,
    trans: TransitionMatrix<f64>,
}

impl Problem {
    fn new(emissions: &[Vec<f64>], transitions: &[Vec<f64>], mask: Option<Vec<bool>>) -> PyResult<Self> {
        let (n, k, emissions) = flatten(emissions, "emission")?;
        let (r, c, t) = flatten(transitions, "transition")?;
        let mask = mask.unwrap_or_else(|| vec![true; n]);
        let trans = TransitionMatrix::from_tensor(Tensor::new(vec![r, c], t).map_err(py_err)?).map_err(py_err)?;
        Ok(Self {
            k,
            emissions,
            mask,
            trans,
        })
    }

    fn view(&self) -> PyResult<EmissionView<'_, f64>> {
        EmissionView::new(&self.emissions, self.k, &self.mask).map_err(py_err)
    }
}

/// Best tag sequence and its score. `transitions` is `(K+2)×(K+2)` with
/// START at row `K` and END at column `K+1`; masked positions get tag 0.
#[pyfunction]
#[pyo3(signature = (emissions, transitions, mask=None))]
fn viterbi(
    emissions: Vec<Vec<f64>>,
    transitions: Vec<Vec<f64>>,
    mask: Option<Vec<bool>>,
) -> PyResult<(Vec<usize>, f64)> {
    let p = Problem::new(&emissions, &transitions, mask)?;
    let d = crf::viterbi(&p.view()?, &p.trans).map_err(py_err)?;
    Ok((d.tags, d.score))
}

/// Log of the sum of exponentiated scores over all tag sequences.
#[pyfunction]
#[pyo3(signature = (emissions, transitions, mask=None))]
fn log_partition(emissions: Vec<Vec<f64>>, transitions: Vec<Vec<f64>>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    let p = Problem::new(&emissions, &transitions, mask)?;
    crf::log_partition(&p.view()?, &p.trans).map_err(py_err)
}

/// Strict span scores for sentences of BIO tag strings.
#[pyfunction]
fn span_scores(
    classes: Vec<String>,
    gold: Vec<Vec<String>>,
    pred: Vec<Vec<String>>,
) -> PyResult<BTreeMap<String, f64>> {
    let scheme = LabelScheme::new(classes).map_err(py_err)?;
    if gold.len() != pred.len() {
        return Err(PyValueError::new_err(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let index = |seq: &[String]| -> PyResult<Vec<usize>> {
        seq.iter()
            .map(|t| {
                scheme
                    .tag_index(t)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown tag {t:?}")))
            })
            .collect()
    };
    let mut ev = Evaluator::new(&scheme);
    for (g, p) in gold.iter().zip(&pred) {
        ev.add(&index(g)?, &index(p)?).map_err(py_err)?;
    }
    let r = ev.finish();
    let s = &r.scores;
    Ok(BTreeMap::from([
        ("micro_precision".into(), s.micro_precision),
        ("micro_recall".into(), s.micro_recall),
        ("micro_f1".into(), s.micro_f1),
        ("macro_precision".into(), s.macro_precision),
        ("macro_recall".into(), s.macro_recall),
        ("macro_f1".into(), s.macro_f1),
        ("token_accuracy".into(), r.token_accuracy),
    ]))
}

/// Symmetric per-tensor INT8 quantization: returns the values and the scale.
#[pyfunction]
fn quantize(values: Vec<f32>) -> (Vec<i8>, f64) {
    crfkd::quant::quantize_slice(&values)
}

#[pymodule]
fn crfkd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(log_partition, m)?)?;
    m.add_function(wrap_pyfunction!(span_scores, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    Ok(())
}
