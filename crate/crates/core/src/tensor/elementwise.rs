use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn unary_map<R: Real>(x: &Tensor<R>, f: impl Fn(R) -> R + Sync + Send) -> Tensor<R> {
    let mut out = vec![R::zero(); x.numel()];
    par::map_into(x.data(), &mut out, |&v| f(v));
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn zip_map<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R + Sync + Send) -> Tensor<R> {
    let mut out = vec![R::zero(); a.numel()];
    par::zip_map_into(a.data(), b.data(), &mut out, |&x, &y| f(x, y));
    Tensor::from_parts(a.shape().to_vec(), out)
}

fn reduce_to_scalar<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    Tensor::scalar(t.sum_all())
}

impl<R: Real> Tape<R> {
    /// Pointwise op with derivative `df(x, y)` where `y = f(x)`.
    fn unary<F, D>(&self, x: &Var<R>, f: F, df: D) -> Result<Var<R>>
    where
        F: Fn(R) -> R + Sync + Send,
        D: Fn(R, R) -> R + Sync + Send + 'static,
    {
        let out = Arc::new(unary_map(x.value(), f));
        let xs = x.shared();
        let ys = Arc::clone(&out);
        self.record_shared(out, &[x], move |g, _| {
            let mut gx = vec![R::zero(); g.numel()];
            let xd = xs.data();
            let yd = ys.data();
            for (i, o) in gx.iter_mut().enumerate() {
                *o = g.data()[i] * df(xd[i], yd[i]);
            }
            Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))])
        })
    }

    pub fn neg(&self, x: &Var<R>) -> Result<Var<R>> {
        self.unary(x, |v| -v, |_, _| -R::one())
    }

    pub fn exp(&self, x: &Var<R>) -> Result<Var<R>> {
        self.unary(x, R::exp, |_, y| y)
    }

    /// Natural log. Non-positive inputs are a domain error; callers clamp explicitly.
    pub fn log(&self, x: &Var<R>) -> Result<Var<R>> {
        if let Some(bad) = x.value().data().iter().find(|v| !(**v > R::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(x, R::ln, |x, _| R::one() / x)
    }

    pub fn tanh(&self, x: &Var<R>) -> Result<Var<R>> {
        self.unary(x, R::tanh, |_, y| R::one() - y * y)
    }

    pub fn sigmoid(&self, x: &Var<R>) -> Result<Var<R>> {
        self.unary(x, sigmoid, |_, y| y * (R::one() - y))
    }

    pub fn relu(&self, x: &Var<R>) -> Result<Var<R>> {
        self.unary(
            x,
            |v| v.max(R::zero()),
            |x, _| if x > R::zero() { R::one() } else { R::zero() },
        )
    }

    pub fn sqrt(&self, x: &Var<R>) -> Result<Var<R>> {
        if let Some(bad) = x.value().data().iter().find(|v| **v < R::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        self.unary(x, R::sqrt, |_, y| R::of(0.5) / y)
    }

    pub fn abs(&self, x: &Var<R>) -> Result<Var<R>> {
        self.unary(x, |v| num_traits::Float::abs(v), |x, _| x.signum())
    }

    pub fn square(&self, x: &Var<R>) -> Result<Var<R>> {
        self.unary(x, |v| v * v, |x, _| R::of(2.0) * x)
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: &Var<R>, c: R) -> Result<Var<R>> {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: &Var<R>, c: R) -> Result<Var<R>> {
        self.unary(x, move |v| v + c, |_, _| R::one())
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&self, x: &Var<R>, floor: R) -> Result<Var<R>> {
        self.unary(
            x,
            move |v| v.max(floor),
            move |x, _| if x > floor { R::one() } else { R::zero() },
        )
    }

    fn binary(&self, a: &Var<R>, b: &Var<R>, op: Binary) -> Result<Var<R>> {
        let (sa, sb) = (a.shape(), b.shape());
        let a_scalar = a.value().numel() == 1 && sa != sb;
        let b_scalar = b.value().numel() == 1 && sa != sb;
        if sa != sb && !a_scalar && !b_scalar {
            return Err(Error::dim(
                "elementwise",
                format!("shapes {sa:?} and {sb:?} neither match nor broadcast a scalar"),
            ));
        }
        let f = move |x: R, y: R| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out = if a_scalar {
            let s = a.value().data()[0];
            unary_map(b.value(), move |y| f(s, y))
        } else if b_scalar {
            let s = b.value().data()[0];
            unary_map(a.value(), move |x| f(x, s))
        } else {
            zip_map(a.value(), b.value(), f)
        };
        let (av, bv) = (a.shared(), b.shared());
        self.record(out, &[a, b], move |g, needs| {
            let an = av.numel();
            let bn = bv.numel();
            let n = g.numel();
            let at = |i: usize| av.data()[if an == 1 { 0 } else { i }];
            let bt = |i: usize| bv.data()[if bn == 1 { 0 } else { i }];
            let mut ga = needs[0].then(|| vec![R::zero(); n]);
            let mut gb = needs[1].then(|| vec![R::zero(); n]);
            for i in 0..n {
                let gi = g.data()[i];
                let (da, db) = match op {
                    Binary::Add => (gi, gi),
                    Binary::Sub => (gi, -gi),
                    Binary::Mul => (gi * bt(i), gi * at(i)),
                    Binary::Div => {
                        let y = bt(i);
                        (gi / y, -gi * at(i) / (y * y))
                    }
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] = da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] = db;
                }
            }
            let finish = |grad: Option<Vec<R>>, src: &Tensor<R>| {
                grad.map(|d| {
                    let full = Tensor::from_parts(g.shape().to_vec(), d);
                    if src.numel() == 1 && src.shape() != g.shape() {
                        reduce_to_scalar(&full).reshape(src.shape()).expect("scalar reshape")
                    } else {
                        full
                    }
                })
            };
            Ok(vec![finish(ga, &av), finish(gb, &bv)])
        })
    }

    pub fn add(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        self.binary(a, b, Binary::Div)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: &Var<R>) -> Result<Var<R>> {
        let out = reduce_to_scalar(x.value());
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))]))
    }

    pub fn mean(&self, x: &Var<R>) -> Result<Var<R>> {
        let n = x.value().numel();
        if n == 0 {
            return Err(Error::arg("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(&s, R::one() / R::of(n as f64))
    }

    /// Per-item sums over every axis but the first: `[B, ...] -> [B]`.
    pub fn sum_per_item(&self, x: &Var<R>) -> Result<Var<R>> {
        if x.value().ndim() == 0 {
            return Err(Error::dim("sum_per_item", "needs a leading batch axis"));
        }
        let b = x.shape()[0];
        let shape = x.shape().to_vec();
        let row = if b == 0 { 0 } else { x.value().numel() / b };
        let sums: Vec<R> = x
            .value()
            .data()
            .chunks(row.max(1))
            .take(b)
            .map(|c| R::of(c.iter().map(|v| v.as_f64()).sum()))
            .collect();
        self.record(Tensor::from_parts(vec![b], sums), &[x], move |g, _| {
            let mut gx = Vec::with_capacity(b * row);
            for &gi in g.data() {
                gx.extend(std::iter::repeat(gi).take(row));
            }
            Ok(vec![Some(Tensor::from_parts(shape.clone(), gx))])
        })
    }
}

#[inline]
pub(crate) fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}
