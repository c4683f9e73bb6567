use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::ParamSet;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|`, useful where true gradients are near
    /// zero and the relative error is dominated by roundoff.
    pub max_abs_error: f64,
    pub param_count: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub loss: f64,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &ParamSet, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Checks the gradient of `loss_fn` at `params` against central finite
/// differences with step `delta`.
///
/// `loss_fn` builds a scalar on the given tape from the bound parameter
/// handles. Gradients already held in `params` are overwritten.
pub fn grad_check<F>(loss_fn: F, params: &mut ParamSet, delta: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(loss_fn, params, delta, 0.0)
}

/// As [`grad_check`], with `fault` added to every analytic gradient entry
/// before comparison. Used to confirm that the checker flags broken
/// gradients.
pub fn grad_check_with_fault<F>(
    mut loss_fn: F,
    params: &mut ParamSet,
    delta: f64,
    fault: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(delta > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {delta}"
        )));
    }
    params.zero_grads();
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    tape.backward_into(loss, params)?;

    let again = evaluate(params, &mut loss_fn)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        param_count: params.scalar_count(),
        worst: None,
        loss: base,
    };
    for slot in 0..params.len() {
        let analytic: Vec<f64> = params
            .get(slot)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_default();
        for i in 0..params.get(slot).len() {
            let original = params.get(slot).values()[i];
            params.get_mut(slot).values_mut()[i] = original + delta;
            let plus = evaluate(params, &mut loss_fn);
            params.get_mut(slot).values_mut()[i] = original - delta;
            let minus = evaluate(params, &mut loss_fn);
            params.get_mut(slot).values_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * delta);
            let a = analytic.get(i).copied().unwrap_or(0.0) + fault;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.name(slot).to_string(), i));
            }
        }
    }
    Ok(report)
}
