//! Python bindings. The plain functions below hold the logic; the
//! `#[pyfunction]` wrappers only convert errors.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use tutor::abstraction::{flop_count as flops, AttentionMode};
use tutor::config::RunConfig;
use tutor::linking::nms_one_hot as nms;
use tutor::matching::hungarian as hungarian_rows;
use tutor::suites::gradcheck_suites;
use tutor::synth::{generate_clip, Action};

fn py_err(e: tutor::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn square(matrix: &[Vec<f64>]) -> tutor::Result<(Vec<f64>, usize)> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(tutor::Error::Invalid(format!("matrix must be square, got {n} rows of lengths {:?}", matrix.iter().map(Vec::len).collect::<Vec<_>>())));
    }
    Ok((matrix.concat(), n))
}

pub fn link_assignment(matrix: &[Vec<f64>]) -> tutor::Result<Vec<usize>> {
    let (flat, n) = square(matrix)?;
    nms(&flat, n)
}

pub fn attention_flops(mode: &str, h: usize, w: usize, t: usize, c: usize, window: usize, kernel: usize) -> tutor::Result<u64> {
    let mode = match mode {
        "global" => AttentionMode::Global,
        "irregular-window" => AttentionMode::IrregularWindow,
        _ => return Err(tutor::Error::Invalid(format!("unknown attention mode {mode:?}"))),
    };
    Ok(flops(mode, h, w, t, c, window, kernel))
}

/// Resolved config text after applying `key=value` overrides.
pub fn resolve_config(overrides: &[String]) -> tutor::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Greedy one-to-one assignment of a square similarity matrix (rows are
/// exemplar tokens, columns the tokens of another frame).
#[pyfunction]
fn nms_one_hot(matrix: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    link_assignment(&matrix).map_err(py_err)
}

/// Minimum-cost assignment of each row to a distinct column.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    hungarian_rows(&cost).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (mode, h, w, t, c, window = 7, kernel = 3))]
fn flop_count(mode: &str, h: usize, w: usize, t: usize, c: usize, window: usize, kernel: usize) -> PyResult<u64> {
    attention_flops(mode, h, w, t, c, window, kernel).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (overrides = Vec::new()))]
fn config_text(overrides: Vec<String>) -> PyResult<String> {
    resolve_config(&overrides).map(|c| c.to_text()).map_err(py_err)
}

/// One synthetic clip: `(shape, flat frames, annotations)`, where each
/// annotation is `(human box, object box, class, action names)`.
#[pyfunction]
#[pyo3(signature = (index, overrides = Vec::new()))]
#[allow(clippy::type_complexity)]
fn synth_clip(index: u64, overrides: Vec<String>) -> PyResult<((usize, usize, usize, usize), Vec<f32>, Vec<([f64; 4], [f64; 4], usize, Vec<String>)>)> {
    let cfg = resolve_config(&overrides).map_err(py_err)?;
    let (clip, gts) = generate_clip(&cfg.scenario(), index).map_err(py_err)?;
    let ann = gts
        .into_iter()
        .map(|g| {
            let names = Action::ALL.iter().zip(&g.actions).filter(|(_, &on)| on).map(|(a, _)| a.name().to_string()).collect();
            (g.human, g.object, g.class, names)
        })
        .collect();
    Ok(((clip.t, clip.h, clip.w, 3), clip.frames, ann))
}

/// Runs the named finite-difference suites (all when empty) and returns
/// `(name, tolerance, max relative error, passed)` rows.
#[pyfunction]
#[pyo3(signature = (names = Vec::new()))]
fn gradcheck(names: Vec<String>) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let suites = gradcheck_suites();
    if let Some(bad) = names.iter().find(|n| !suites.iter().any(|s| s.name == n.as_str())) {
        return Err(PyValueError::new_err(format!("unknown suite {bad:?}")));
    }
    suites
        .iter()
        .filter(|s| names.is_empty() || names.iter().any(|n| n == s.name))
        .map(|s| {
            let r = s.run().map_err(py_err)?;
            Ok((r.name.to_string(), r.tolerance, r.max_rel_error, r.passed()))
        })
        .collect()
}

#[pymodule]
fn tutor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(nms_one_hot, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(config_text, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
