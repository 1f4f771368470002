use crate::error::{Error, Result};
use crate::numerics::tensor::DiffTensor;

/// Largest `|analytic − central difference| / max(1, |analytic|)` over the entries of `x`.
///
/// `f` is called once for the analytic gradient and twice per entry with `x`
/// perturbed in place; it must be deterministic. `x` is restored afterwards and
/// its gradient buffer is left holding the analytic gradient.
pub fn gradcheck<F>(mut f: F, x: &DiffTensor, h: f64) -> Result<f64>
where
    F: FnMut(&DiffTensor) -> Result<DiffTensor>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("gradcheck step {h} must be positive")));
    }
    if let Some(i) = x.value().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i, context: "gradcheck input".into() });
    }
    x.zero_grad();
    let loss = f(x)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic = x.grad();
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i, context: "analytic gradient".into() });
    }

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.value()[i];
        x.value_mut()[i] = orig + h;
        let plus = f(x);
        x.value_mut()[i] = orig - h;
        let minus = f(x);
        x.value_mut()[i] = orig;
        let (plus, minus) = (plus?.item(), minus?.item());
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite { index: i, context: "central difference".into() });
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
