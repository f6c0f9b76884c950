use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-3;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all entries of all parameters.
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter, flat entry)` of the worst entry.
    pub worst: (usize, usize),
}

/// Central differences of `f` at `params`, one tensor per parameter.
pub fn numeric_gradient<Func>(f: &Func, params: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>>
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape().to_vec());
        for e in 0..params[pi].numel() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            g.data_mut()[e] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compares reverse-mode gradients of the scalar `f` against central differences.
///
/// `f` receives a fresh double-precision tape with one differentiable leaf per
/// entry of `params` and returns the scalar to differentiate.
pub fn check_gradients<Func>(f: Func, params: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let numeric = numeric_gradient(&f, params, FD_STEP)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, per_param: Vec::new(), worst: (0, 0) };
    for (pi, (&v, num)) in vars.iter().zip(&numeric).enumerate() {
        let analytic = grads.wrt(v);
        let mut worst = 0.0f64;
        for (e, (&a, &n)) in analytic.data().iter().zip(num.data()).enumerate() {
            let err = relative_error(a, n);
            if err > worst {
                worst = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, e);
            }
        }
        report.per_param.push(worst);
    }
    Ok(report)
}
