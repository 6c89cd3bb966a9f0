//! Central finite-difference verification of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{OvError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all checked entries.
    pub max_relative_error: f64,
    /// Per-parameter maximum of the same quantity.
    pub per_param: Vec<f64>,
    /// `(param, entry)` of the worst entry, if any entry was checked.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose `±eps` evaluations landed on different sides of a kink.
    pub skipped: usize,
}

struct Eval {
    loss: f64,
    pattern: Vec<bool>,
}

fn evaluate<F>(loss_fn: &mut F, params: &[Matrix]) -> Result<(Eval, Tape, Vec<Var>, Var)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = loss_fn(&mut tape, &vars)?;
    let loss = tape.value(out).item();
    if !loss.is_finite() {
        return Err(OvError::Numeric(format!("loss evaluated to {loss}")));
    }
    let eval = Eval {
        loss,
        pattern: tape.activation_pattern().to_vec(),
    };
    Ok((eval, tape, vars, out))
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per entry of `params`, and
/// must return a `1×1` node. It is re-run twice per parameter entry.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(OvError::Domain(format!(
            "finite-difference eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let (_, tape, vars, out) = evaluate(&mut loss_fn, params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_param: vec![0.0; params.len()],
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let base = p.as_slice()[k];
            work[pi].as_mut_slice()[k] = base + eps;
            let (plus, ..) = evaluate(&mut loss_fn, &work)?;
            work[pi].as_mut_slice()[k] = base - eps;
            let (minus, ..) = evaluate(&mut loss_fn, &work)?;
            work[pi].as_mut_slice()[k] = base;

            if plus.pattern != minus.pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let err = (analytic[pi].as_slice()[k] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}
