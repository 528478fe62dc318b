//! Small dense matrices: LU factorisation, inverse, log-determinant.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Smallest |det| accepted as invertible.
pub const MIN_ABS_DET: f64 = 1e-12;

/// Row-pivoted LU factorisation `P A = L U`, packed in one buffer.
#[derive(Clone, Debug)]
pub struct Lu<R> {
    n: usize,
    lu: Vec<R>,
    perm: Vec<usize>,
    sign: R,
}

impl<R: Real> Lu<R> {
    pub fn new(a: &Tensor<R>) -> Result<Self> {
        let n = square_dim(a)?;
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = R::one();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    lu[i * n + col]
                        .abs()
                        .partial_cmp(&lu[j * n + col].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(col);
            let pv = lu[pivot * n + col];
            if pv == R::zero() || !pv.is_finite() {
                return Err(Error::Numeric(format!(
                    "matrix is singular (zero pivot in column {col})"
                )));
            }
            if pivot != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot * n + j);
                }
                perm.swap(col, pivot);
                sign = -sign;
            }
            for row in col + 1..n {
                let f = lu[row * n + col] / lu[col * n + col];
                lu[row * n + col] = f;
                for j in col + 1..n {
                    let u = lu[col * n + j];
                    lu[row * n + j] -= f * u;
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn log_abs_det(&self) -> R {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn det(&self) -> R {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[R]) -> Vec<R> {
        let n = self.n;
        let mut x: Vec<R> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= l * xj;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= u * xj;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor<R> {
        let n = self.n;
        let mut inv = vec![R::zero(); n * n];
        let mut e = vec![R::zero(); n];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = R::zero());
            e[col] = R::one();
            for (row, v) in self.solve(&e).into_iter().enumerate() {
                inv[row * n + col] = v;
            }
        }
        Tensor::from_parts(vec![n, n], inv)
    }
}

fn square_dim<R: Real>(a: &Tensor<R>) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::arg(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Inverse of a square matrix, rejecting |det| below [`MIN_ABS_DET`].
pub fn invert<R: Real>(a: &Tensor<R>) -> Result<Tensor<R>> {
    let lu = Lu::new(a)?;
    check_det(&lu)?;
    Ok(lu.inverse())
}

fn check_det<R: Real>(lu: &Lu<R>) -> Result<()> {
    let d = lu.det().abs().as_f64();
    if d <= MIN_ABS_DET || !d.is_finite() {
        return Err(Error::Numeric(format!(
            "matrix is not safely invertible (|det| = {d:e})"
        )));
    }
    Ok(())
}

pub fn transpose<R: Real>(a: &Tensor<R>) -> Tensor<R> {
    let (r, c) = (a.dim(0), a.dim(1));
    Tensor::from_fn(&[c, r], |i| a.data()[(i % r) * c + i / r])
}

pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![R::zero(); n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b.data()[p * m + j];
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Random orthogonal matrix: Gram-Schmidt on a Gaussian matrix (computed in f64).
pub fn random_orthogonal<R: Real>(n: usize, rng: &mut impl Rng) -> Tensor<R> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (v, q) in tail[0].iter_mut().zip(&head[j]) {
                    *v -= d * q;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return Tensor::from_fn(&[n, n], |i| R::of(rows[i / n][i % n]));
        }
    }
}

impl<R: Real> Tape<R> {
    /// `log |det W|` as a scalar; gradient `W^{-T}`.
    pub fn log_abs_det(&self, w: &Var<R>) -> Result<Var<R>> {
        let lu = Lu::new(w.value())?;
        check_det(&lu)?;
        let value = lu.log_abs_det();
        let inv_t = transpose(&lu.inverse());
        self.record(Tensor::scalar(value), &[w], move |g, _| {
            let s = g.data()[0];
            Ok(vec![Some(inv_t.map(|v| v * s))])
        })
    }

    /// Matrix inverse; gradient `-W^{-T} G W^{-T}`.
    pub fn matrix_inverse(&self, w: &Var<R>) -> Result<Var<R>> {
        let inv = invert(w.value())?;
        self.matrix_inverse_with(w, Arc::new(inv))
    }

    /// As [`Tape::matrix_inverse`] with the inverse already computed by the caller.
    pub fn matrix_inverse_with(&self, w: &Var<R>, inverse: Arc<Tensor<R>>) -> Result<Var<R>> {
        if inverse.shape() != w.shape() {
            return Err(Error::dim("matrix_inverse", "cached inverse has the wrong shape"));
        }
        let inv = Arc::clone(&inverse);
        self.record_shared(inverse, &[w], move |g, _| {
            let inv_t = transpose(&inv);
            let gw = matmul(&matmul(&inv_t, g), &inv_t).map(|v| -v);
            Ok(vec![Some(gw)])
        })
    }
}
