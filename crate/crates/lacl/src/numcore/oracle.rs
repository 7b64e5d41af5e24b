use super::tensor::Tensor;
use super::NumError;

/// Central-difference step. With f64 this balances truncation against
/// cancellation for the loss magnitudes seen here.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors. Below this scale the comparison is
/// effectively absolute, which keeps finite-difference noise near zero
/// gradients from raising false alarms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Numerically estimates the gradient of a scalar function of several tensors
/// with central differences, one coordinate at a time.
pub fn finite_diff_gradient<F>(
    f: F,
    params: &[Tensor],
    step: f64,
) -> Result<Vec<Tensor>, NumError>
where
    F: Fn(&[Tensor]) -> Result<f64, NumError>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(NumError::arg("finite_diff_gradient", format!("step {step}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape().to_vec());
        for ci in 0..params[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = f(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = f(&work)?;
            work[pi].data_mut()[ci] = orig;
            let d = (up - down) / (2.0 * step);
            if !d.is_finite() {
                return Err(NumError::NonFiniteObjective(format!(
                    "difference quotient at param {pi} coord {ci}"
                )));
            }
            g.data_mut()[ci] = d;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative disagreement between two gradient estimates, with the
/// denominator floored at [`REL_ERR_FLOOR`].
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
