//! Central finite-difference verification of tape gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamVars, Tape, Var};
use crate::error::{MnoError, Result};
use crate::field::GridField;
use crate::operator::OperatorModel;
use crate::params::ParamStore;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that components whose true
/// gradient is zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Scalar budget for a gradient check.
pub const MAX_CHECK_PARAMS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst component.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Check every scalar of `store`. `build` records the function on a tape
/// bound to the given store and returns its output plus the parameter
/// bindings; the checked loss is `Σ w ⊙ output` for a fixed random `w`.
/// With `fault` set the analytic pass uses a tape with a corrupted scan
/// adjoint.
pub fn gradient_check_fn<F>(store: &ParamStore<f64>, tolerance: f64, fault: bool, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<(Var, ParamVars)>,
{
    let n = store.scalar_count();
    if n > MAX_CHECK_PARAMS {
        return Err(MnoError::invalid(format!("{n} parameters exceed the gradient-check budget {MAX_CHECK_PARAMS}")));
    }
    let mut tape = if fault { Tape::with_adjoint_fault() } else { Tape::new() };
    let (out, pv) = build(&mut tape, store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let w: Array2<f64> = Array2::from_shape_fn(tape.value(out).dim(), |_| rng.random_range(-1.0..1.0));
    let grads = tape.backward(out, w.clone()).params(&pv, store);

    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let (o, _) = build(&mut t, s)?;
        Ok((t.value(o) * &w).sum())
    };
    let mut probe = store.clone();
    let mut worst = (0.0f64, String::new());
    for (k, (id, p)) in store.iter().enumerate() {
        for idx in 0..p.value.len() {
            let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
            let orig = p.value[[r, c]];
            probe.get_mut(id)[[r, c]] = orig + FD_STEP;
            let up = loss(&probe)?;
            probe.get_mut(id)[[r, c]] = orig - FD_STEP;
            let down = loss(&probe)?;
            probe.get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[k][[r, c]];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{}[{r},{c}]", p.name));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: worst.0, worst: worst.1, checked: n, tolerance, passed: worst.0 <= tolerance })
}

/// Gradient check of the full operator stack on one input.
pub fn gradient_check(model: &OperatorModel<f64>, input: &GridField, tolerance: f64, fault: bool) -> Result<GradCheckReport> {
    gradient_check_fn(&model.params, tolerance, fault, |tape, store| {
        let pv = tape.bind_params(store);
        let rec = model.record(tape, &pv, input)?;
        Ok((rec.output, pv))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_quadratic_loss_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let wid = store.add("w", Array2::from_shape_fn((3, 2), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64 + 0.1));
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i + 2 * j) as f64 * 0.25 - 0.5);
        let rep = gradient_check_fn(&store, 1e-9, false, |tape, s| {
            let pv = tape.bind_params(s);
            let xv = tape.constant(x.clone());
            let y = tape.matmul(xv, pv.get(wid));
            Ok((tape.mul(y, y), pv))
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.checked, 6);
    }
}
