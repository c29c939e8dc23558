use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad<F>(f: F, t: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = t.clone();
    let mut grad = Vec::with_capacity(t.numel());
    for i in 0..t.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(t.shape().to_vec(), grad)
}

/// Largest elementwise relative error, with a unit floor on the denominator
/// so entries near zero are compared absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
