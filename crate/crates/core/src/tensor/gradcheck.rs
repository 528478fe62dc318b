use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<R, F>(f: F, x: &Tensor<R>, h: R) -> Result<Tensor<R>>
where
    R: Real,
    F: FnMut(&Tensor<R>) -> Result<R>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let partial = finite_diff_at(f, x, h, &all)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), partial))
}

/// Central differences at selected flat coordinates only.
pub fn finite_diff_at<R, F>(mut f: F, x: &Tensor<R>, h: R, coords: &[usize]) -> Result<Vec<R>>
where
    R: Real,
    F: FnMut(&Tensor<R>) -> Result<R>,
{
    if !(h > R::zero()) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (h + h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`: relative error with a floor for vanishing gradients.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
