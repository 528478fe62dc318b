use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::elementwise::sigmoid;
use crate::tensor::{Tape, Tensor, Var};

/// `(outer, extent, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn expect_rank<R: Real>(op: &'static str, x: &Var<R>, rank: usize) -> Result<()> {
    if x.value().ndim() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

impl<R: Real> Tape<R> {
    pub fn reshape(&self, x: &Var<R>, shape: &[usize]) -> Result<Var<R>> {
        let out = x.value().clone().reshape(shape)?;
        let orig = x.shape().to_vec();
        self.record(out, &[x], move |g, _| Ok(vec![Some(g.clone().reshape(&orig)?)]))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, x: &Var<R>, axis: usize, start: usize, len: usize) -> Result<Var<R>> {
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = x.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.record(Tensor::from_parts(out_shape, out), &[x], move |g, _| {
            let mut gx = vec![R::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(Tensor::from_parts(shape.clone(), gx))])
        })
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[&Var<R>], axis: usize) -> Result<Var<R>> {
        let first = xs.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {shape0:?}")));
        }
        for x in xs {
            let s = x.shape();
            let ok = s.len() == shape0.len() && s.iter().zip(shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", format!("{s:?} does not match {shape0:?}")));
            }
        }
        let (outer, _, inner) = split_axis(shape0, axis);
        let extents: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &e) in xs.iter().zip(&extents) {
                out.extend_from_slice(&x.value().data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = shape0.to_vec();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
        self.record(Tensor::from_parts(out_shape, out), xs, move |g, needs| {
            let mut grads = Vec::with_capacity(extents.len());
            let mut offset = 0;
            for (i, &e) in extents.iter().enumerate() {
                if needs[i] {
                    let mut gx = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g.data()[base..base + e * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(shapes[i].clone(), gx)));
                } else {
                    grads.push(None);
                }
                offset += e;
            }
            Ok(grads)
        })
    }

    /// Fold time into channels: `[B, C, g*N] -> [B, C*g, N]` with
    /// `out[b, c*g + j, n] = x[b, c, n*g + j]`.
    pub fn group(&self, x: &Var<R>, g: usize) -> Result<Var<R>> {
        expect_rank("group", x, 3)?;
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if g == 0 || t % g != 0 {
            return Err(Error::dim("group", format!("time length {t} is not a multiple of {g}")));
        }
        let n = t / g;
        let out = regroup(x.value().data(), b, c, g, n, true);
        self.record(Tensor::from_parts(vec![b, c * g, n], out), &[x], move |gr, _| {
            Ok(vec![Some(Tensor::from_parts(
                vec![b, c, t],
                regroup(gr.data(), b, c, g, n, false),
            ))])
        })
    }

    /// Inverse of [`Tape::group`]: `[B, C*g, N] -> [B, C, g*N]`.
    pub fn ungroup(&self, x: &Var<R>, g: usize) -> Result<Var<R>> {
        expect_rank("ungroup", x, 3)?;
        let (b, cg, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if g == 0 || cg % g != 0 {
            return Err(Error::dim(
                "ungroup",
                format!("{cg} channels do not split into groups of {g}"),
            ));
        }
        let c = cg / g;
        let out = regroup(x.value().data(), b, c, g, n, false);
        self.record(Tensor::from_parts(vec![b, c, g * n], out), &[x], move |gr, _| {
            Ok(vec![Some(Tensor::from_parts(
                vec![b, cg, n],
                regroup(gr.data(), b, c, g, n, true),
            ))])
        })
    }

    /// Repeat every time step `factor` times: `[B, C, F] -> [B, C, F*factor]`.
    pub fn repeat_time(&self, x: &Var<R>, factor: usize) -> Result<Var<R>> {
        expect_rank("repeat_time", x, 3)?;
        if factor == 0 {
            return Err(Error::arg("repeat factor must be positive"));
        }
        let shape = x.shape().to_vec();
        let f = shape[2];
        let rows = shape[0] * shape[1];
        let mut out = Vec::with_capacity(rows * f * factor);
        for row in x.value().data().chunks(f.max(1)).take(rows) {
            for &v in row {
                out.extend(std::iter::repeat(v).take(factor));
            }
        }
        self.record(
            Tensor::from_parts(vec![shape[0], shape[1], f * factor], out),
            &[x],
            move |g, _| {
                let gx: Vec<R> = g.data().chunks(factor).map(|c| c.iter().copied().sum()).collect();
                Ok(vec![Some(Tensor::from_parts(shape.clone(), gx))])
            },
        )
    }

    /// Gated activation `tanh(a[:, :C]) * sigmoid(a[:, C:])` for `a` of shape `[B, 2C, T]`.
    pub fn gate(&self, a: &Var<R>) -> Result<Var<R>> {
        expect_rank("gate", a, 3)?;
        let (b, c2, t) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        if c2 % 2 != 0 {
            return Err(Error::dim("gate", format!("channel count {c2} is odd")));
        }
        let c = c2 / 2;
        let half = c * t;
        let src = a.value().data();
        let mut out = vec![R::zero(); b * half];
        crate::par::for_each_chunk_mut(&mut out, half.max(1), |bi, dst| {
            let base = bi * 2 * half;
            let (ta, sa) = (&src[base..base + half], &src[base + half..base + 2 * half]);
            for ((o, &x), &y) in dst.iter_mut().zip(ta).zip(sa) {
                *o = x.tanh() * sigmoid(y);
            }
        });
        let av = a.shared();
        self.record(Tensor::from_parts(vec![b, c, t], out), &[a], move |g, _| {
            let src = av.data();
            let mut ga = vec![R::zero(); b * 2 * half];
            crate::par::for_each_chunk_mut(&mut ga, (2 * half).max(1), |bi, dst| {
                let base = bi * 2 * half;
                let gd = &g.data()[bi * half..(bi + 1) * half];
                let (dt, ds) = dst.split_at_mut(half);
                for i in 0..half {
                    let th = src[base + i].tanh();
                    let sg = sigmoid(src[base + half + i]);
                    dt[i] = gd[i] * sg * (R::one() - th * th);
                    ds[i] = gd[i] * th * sg * (R::one() - sg);
                }
            });
            Ok(vec![Some(Tensor::from_parts(vec![b, c2, t], ga))])
        })
    }
}

/// `forward = true`: `[B, C, g*N] -> [B, C*g, N]`; otherwise the inverse.
fn regroup<R: Real>(src: &[R], b: usize, c: usize, g: usize, n: usize, forward: bool) -> Vec<R> {
    let mut out = vec![R::zero(); b * c * g * n];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * g * n;
            for j in 0..g {
                let row = base + j * n;
                for ni in 0..n {
                    let flat = base + ni * g + j;
                    if forward {
                        out[row + ni] = src[flat];
                    } else {
                        out[flat] = src[row + ni];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_index_arithmetic() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::new(&[1, 1, 8], (0..8).map(|v| v as f64).collect()).unwrap());
        let y = tape.group(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 2]);
        assert_eq!(y.value().data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
        let back = tape.ungroup(&y, 4).unwrap();
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn group_multichannel_layout() {
        // channel c, sample j of group n lands at channel c*g + j
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4], |i| i as f64));
        let y = tape.group(&x, 2).unwrap();
        assert_eq!(y.value().data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 3], |i| i as f32));
        let a = tape.narrow(&x, 1, 0, 1).unwrap();
        let b = tape.narrow(&x, 1, 1, 3).unwrap();
        let y = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.value(), x.value());
        assert!(tape.narrow(&x, 1, 2, 3).is_err());
    }

    #[test]
    fn repeat_duplicates_frames() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.repeat_time(&x, 3).unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn gate_at_zero() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap());
        let y = tape.gate(&x).unwrap();
        assert!((y.value().data()[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
    }
}
