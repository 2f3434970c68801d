//! Central finite-difference checks for tape gradients.
//!
//! Used by unit tests and the acceptance suite. The numeric side never
//! touches [`Tape::backward`], so the two routes stay independent.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// Outer step used for coordinate `theta`. The derivative is extrapolated
/// from central differences at `h` and `h/2`, so the truncation error is
/// O(h⁴) and a comparatively large step keeps round-off near 1e-12.
pub fn step_for(theta: f64) -> f64 {
    1e-3 * theta.abs().max(1.0)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst mismatch found by [`check_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic and central-difference gradients of `f` with respect to
/// the listed parameters. At most `max_per_param` coordinates are probed per
/// parameter, spread evenly across the tensor.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], max_per_param: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    store.zero_grads();
    tape.accumulate_param_grads(store)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for &id in ids {
        let analytic: Vec<f64> = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => continue,
        };
        let n = analytic.len();
        let stride = (n / max_per_param.max(1)).max(1);
        for idx in (0..n).step_by(stride).take(max_per_param) {
            let theta = store.get(id).values()[idx];
            let h = step_for(theta);
            let mut central = |h: f64| -> Result<f64> {
                store.get_mut(id).values_mut()[idx] = theta + h;
                let plus = eval(store, &f)?;
                store.get_mut(id).values_mut()[idx] = theta - h;
                let minus = eval(store, &f)?;
                store.get_mut(id).values_mut()[idx] = theta;
                Ok((plus - minus) / (2.0 * h))
            };
            let (wide, narrow) = (central(h)?, central(h / 2.0)?);
            let numeric = (4.0 * narrow - wide) / 3.0;
            let err = relative_error(analytic[idx], numeric);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = f(&mut tape, store)?;
    Ok(tape.scalar(v))
}
