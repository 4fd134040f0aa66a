use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Checks the gradient of a scalar function of the parameters `ids`.
///
/// `f` records a forward pass on a fresh tape reading from the store and
/// returns the tape together with the scalar output.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, ids: &[ParamId], eps: f64, mut f: F) -> Result<FiniteDiffReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let (tape, out) = f(store)?;
    let y0 = tape.try_value(out)?.item();
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("function output {y0}")));
    }
    let grads = tape.backward(out)?;

    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        let analytic = grads.param_or_zeros(id, &shape);
        for i in 0..analytic.numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&mut f, store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&mut f, store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.param(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn eval<F>(f: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    let (tape, out) = f(store)?;
    let v = tape.try_value(out)?;
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("function output {y}")));
    }
    Ok(y)
}
