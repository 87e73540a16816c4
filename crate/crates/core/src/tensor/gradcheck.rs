//! Central-difference verification of backward rules.

use super::{Real, Result, Tape, Tensor, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Below this magnitude errors are measured against the floor instead:
/// where the true derivative is exactly zero the central difference is
/// pure roundoff and a ratio would report it as a 100% error.
pub const GRAD_FLOOR: f64 = 1e-3;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares the analytic gradient of scalar `f` at `points` with central
/// differences of width `2 * step`, over every coordinate of every input.
pub fn finite_diff_check_many<F, E, Func>(f: Func, points: &[Tensor<F>], step: f64) -> Result<GradCheck, E>
where
    F: Real,
    E: From<TensorError>,
    Func: for<'t> Fn(&[Var<'t, F>]) -> Result<Var<'t, F>, E>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid { op: "finite_diff_check", detail: "step must be positive".into() }.into());
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, F>> = points.iter().map(|p| tape.var(p.clone())).collect();
        let out = f(&vars)?;
        let grads = tape.backward(out).map_err(E::from)?;
        vars.iter().map(|&v| grads.wrt(v).to_f64_vec()).collect()
    };
    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, F>> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == which {
                    let mut d = p.data().to_vec();
                    d[coord] = F::from_f64(d[coord].as_f64() + delta);
                    tape.constant(Tensor::from_parts(p.shape().to_vec(), d))
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Ok(f(&vars)?.value().item().as_f64())
    };
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for (which, p) in points.iter().enumerate() {
        for coord in 0..p.numel() {
            let plus = eval(which, coord, step)?;
            let minus = eval(which, coord, -step)?;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "finite_diff_check" }.into());
            }
            let e = rel_error(analytic[which][coord], numeric);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (which, coord);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`finite_diff_check_many`]; returns the max relative error.
pub fn finite_diff_check<F, E, Func>(f: Func, point: &Tensor<F>, step: f64) -> Result<f64, E>
where
    F: Real,
    E: From<TensorError>,
    Func: for<'t> Fn(Var<'t, F>) -> Result<Var<'t, F>, E>,
{
    finite_diff_check_many(|v| f(v[0]), std::slice::from_ref(point), step).map(|r| r.max_rel_error)
}
