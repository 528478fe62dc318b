//! 1-D convolutions over `(batch, channel, time)` signals.
//!
//! Each kernel tap is one GEMM between a weight slice and a time-shifted,
//! stride-1 view of the input, restricted to the columns where the shifted
//! view stays in range (zero padding contributes nothing). Forward work is cut
//! into `(batch item, time tile)` pieces; each output element is produced by the
//! same sequence of operations whichever tile it falls in, so tiling and thread
//! count never change results.

use crate::error::{Error, Result};
use crate::par;
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::{Tape, Tensor, Var};

const TIME_TILE: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding; output length equals input length. Needs an odd kernel.
    Same,
    /// No padding; output shrinks by `dilation * (kernel - 1)`.
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    taps: usize,
    dilation: usize,
    t_in: usize,
    t_out: usize,
    pad: usize,
}

impl ConvGeom {
    /// Input offset of tap `k` relative to the output index.
    fn offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.pad as isize
    }

    /// Output columns in `[t0, t1)` for which tap `k` reads inside the input.
    fn valid(&self, k: usize, t0: usize, t1: usize) -> Option<(usize, usize)> {
        let off = self.offset(k);
        let lo = (t0 as isize).max(-off);
        let hi = (t1 as isize).min(self.t_in as isize - off);
        (lo < hi).then_some((lo as usize, hi as usize))
    }
}

fn forward_tile<R: Real>(
    geo: &ConvGeom,
    x: &[R],
    w: &[R],
    bias: Option<&[R]>,
    b: usize,
    t0: usize,
    t1: usize,
) -> Vec<R> {
    let width = t1 - t0;
    let mut buf = vec![R::zero(); geo.c_out * width];
    if let Some(bias) = bias {
        for (row, &bv) in buf.chunks_mut(width).zip(bias) {
            row.fill(bv);
        }
    }
    let x_off = b * geo.c_in * geo.t_in;
    for k in 0..geo.taps {
        let Some((lo, hi)) = geo.valid(k, t0, t1) else {
            continue;
        };
        let src = (lo as isize + geo.offset(k)) as usize;
        gemm(
            MatRef::new(w, k, geo.c_out, geo.c_in, geo.c_in * geo.taps, geo.taps),
            MatRef::new(x, x_off + src, geo.c_in, hi - lo, geo.t_in, 1),
            R::one(),
            MatMut::new(&mut buf, lo - t0, geo.c_out, hi - lo, width, 1),
        );
    }
    buf
}

fn conv_forward<R: Real>(geo: &ConvGeom, x: &[R], w: &[R], bias: Option<&[R]>) -> Vec<R> {
    let tiles = geo.t_out.div_ceil(TIME_TILE).max(1);
    let items = geo.batch * tiles;
    let per_item = geo.c_out * geo.t_out;
    if tiles == 1 {
        let parts = par::map_range(geo.batch, |b| forward_tile(geo, x, w, bias, b, 0, geo.t_out));
        return parts.concat();
    }
    let parts = par::map_range(items, |i| {
        let (b, tile) = (i / tiles, i % tiles);
        let t0 = tile * TIME_TILE;
        let t1 = (t0 + TIME_TILE).min(geo.t_out);
        forward_tile(geo, x, w, bias, b, t0, t1)
    });
    let mut out = vec![R::zero(); geo.batch * per_item];
    for (i, part) in parts.iter().enumerate() {
        let (b, tile) = (i / tiles, i % tiles);
        let t0 = tile * TIME_TILE;
        let width = part.len() / geo.c_out;
        for o in 0..geo.c_out {
            let dst = b * per_item + o * geo.t_out + t0;
            out[dst..dst + width].copy_from_slice(&part[o * width..(o + 1) * width]);
        }
    }
    out
}

fn grad_input<R: Real>(geo: &ConvGeom, g: &[R], w: &[R]) -> Vec<R> {
    let per_in = geo.c_in * geo.t_in;
    let mut gx = vec![R::zero(); geo.batch * per_in];
    par::for_each_chunk_mut(&mut gx, per_in.max(1), |b, dst| {
        let g_off = b * geo.c_out * geo.t_out;
        for k in 0..geo.taps {
            let Some((lo, hi)) = geo.valid(k, 0, geo.t_out) else {
                continue;
            };
            let src = (lo as isize + geo.offset(k)) as usize;
            gemm(
                MatRef::new(w, k, geo.c_in, geo.c_out, geo.taps, geo.c_in * geo.taps),
                MatRef::new(g, g_off + lo, geo.c_out, hi - lo, geo.t_out, 1),
                R::one(),
                MatMut::new(dst, src, geo.c_in, hi - lo, geo.t_in, 1),
            );
        }
    });
    gx
}

fn grad_weight<R: Real>(geo: &ConvGeom, g: &[R], x: &[R]) -> Vec<R> {
    let per_tap = par::map_range(geo.taps, |k| {
        let mut buf = vec![R::zero(); geo.c_out * geo.c_in];
        if let Some((lo, hi)) = geo.valid(k, 0, geo.t_out) {
            let src = (lo as isize + geo.offset(k)) as usize;
            for b in 0..geo.batch {
                gemm(
                    MatRef::new(g, b * geo.c_out * geo.t_out + lo, geo.c_out, hi - lo, geo.t_out, 1),
                    MatRef::new(x, b * geo.c_in * geo.t_in + src, hi - lo, geo.c_in, 1, geo.t_in),
                    R::one(),
                    MatMut::new(&mut buf, 0, geo.c_out, geo.c_in, geo.c_in, 1),
                );
            }
        }
        buf
    });
    let mut gw = vec![R::zero(); geo.c_out * geo.c_in * geo.taps];
    for (k, buf) in per_tap.iter().enumerate() {
        for (idx, &v) in buf.iter().enumerate() {
            gw[idx * geo.taps + k] = v;
        }
    }
    gw
}

fn grad_bias<R: Real>(geo: &ConvGeom, g: &[R]) -> Vec<R> {
    let mut gb = vec![R::zero(); geo.c_out];
    for b in 0..geo.batch {
        for (o, acc) in gb.iter_mut().enumerate() {
            let row = &g[(b * geo.c_out + o) * geo.t_out..(b * geo.c_out + o + 1) * geo.t_out];
            *acc += row.iter().copied().sum::<R>();
        }
    }
    gb
}

impl<R: Real> Tape<R> {
    /// Dilated cross-correlation: `x [B, C_in, T]`, `weight [C_out, C_in, K]`, `bias [C_out]`.
    pub fn conv1d(
        &self,
        x: &Var<R>,
        weight: &Var<R>,
        bias: Option<&Var<R>>,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var<R>> {
        let (xs, ws) = (x.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::dim(
                "conv1d",
                format!("input {xs:?} / weight {ws:?} must both be rank 3"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(
                "conv1d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::dim(
                    "conv1d",
                    format!("bias {:?} for {} outputs", b.shape(), ws[0]),
                ));
            }
        }
        let taps = ws[2];
        if taps == 0 || dilation == 0 {
            return Err(Error::arg("conv1d needs kernel size and dilation >= 1"));
        }
        let span = dilation * (taps - 1);
        let (pad, t_out) = match padding {
            Padding::Same => {
                if taps % 2 == 0 {
                    return Err(Error::arg("same padding needs an odd kernel size"));
                }
                (span / 2, xs[2])
            }
            Padding::Valid => {
                if xs[2] <= span {
                    return Err(Error::arg(format!(
                        "dilation {dilation} with kernel {taps} leaves no output for length {}",
                        xs[2]
                    )));
                }
                (0, xs[2] - span)
            }
        };
        let geo = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            taps,
            dilation,
            t_in: xs[2],
            t_out,
            pad,
        };
        let out = conv_forward(
            &geo,
            x.value().data(),
            weight.value().data(),
            bias.map(|b| b.value().data()),
        );
        let (xv, wv) = (x.shared(), weight.shared());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.record(
            Tensor::from_parts(vec![geo.batch, geo.c_out, geo.t_out], out),
            &inputs,
            move |g, needs| {
                let gd = g.data();
                let mut grads = vec![
                    needs[0].then(|| Tensor::from_parts(xv.shape().to_vec(), grad_input(&geo, gd, wv.data()))),
                    needs[1].then(|| Tensor::from_parts(wv.shape().to_vec(), grad_weight(&geo, gd, xv.data()))),
                ];
                if has_bias {
                    grads.push(needs[2].then(|| Tensor::from_parts(vec![geo.c_out], grad_bias(&geo, gd))));
                }
                Ok(grads)
            },
        )
    }

    /// Per-timestep channel mixing `out[b, :, t] = weight * x[b, :, t]` (a 1x1 convolution).
    pub fn channel_mix(&self, x: &Var<R>, weight: &Var<R>) -> Result<Var<R>> {
        let ws = weight.shape();
        if ws.len() != 2 || ws[0] != ws[1] {
            return Err(Error::arg(format!("channel_mix weight must be square, got {ws:?}")));
        }
        let w3 = self.reshape(weight, &[ws[0], ws[1], 1])?;
        self.conv1d(x, &w3, None, 1, Padding::Same)
    }

    /// Per-channel ("depthwise") same-padded convolution: `weight [C, K]`, `bias [C]`.
    pub fn depthwise_conv1d(&self, x: &Var<R>, weight: &Var<R>, bias: &Var<R>) -> Result<Var<R>> {
        let (xs, ws) = (x.shape().to_vec(), weight.shape().to_vec());
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[1] || bias.shape() != [xs[1]] {
            return Err(Error::dim(
                "depthwise_conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", bias.shape()),
            ));
        }
        let taps = ws[1];
        if taps % 2 == 0 {
            return Err(Error::arg("same padding needs an odd kernel size"));
        }
        let (bsz, c, t) = (xs[0], xs[1], xs[2]);
        let half = (taps / 2) as isize;
        let xd = x.value().data();
        let wd = weight.value().data();
        let bd = bias.value().data();
        let mut out = vec![R::zero(); bsz * c * t];
        par::for_each_chunk_mut(&mut out, t.max(1), |row, dst| {
            let ch = row % c;
            let src = &xd[row * t..(row + 1) * t];
            dst.fill(bd[ch]);
            for k in 0..taps {
                let off = k as isize - half;
                let wk = wd[ch * taps + k];
                let lo = (-off).max(0) as usize;
                let hi = (t as isize - off).min(t as isize).max(0) as usize;
                for i in lo..hi {
                    dst[i] += wk * src[(i as isize + off) as usize];
                }
            }
        });
        let (xv, wv) = (x.shared(), weight.shared());
        self.record(
            Tensor::from_parts(xs.clone(), out),
            &[x, weight, bias],
            move |g, needs| {
                let gd = g.data();
                let xd = xv.data();
                let wd = wv.data();
                let mut gx = needs[0].then(|| vec![R::zero(); bsz * c * t]);
                let mut gw = vec![R::zero(); c * taps];
                let mut gb = vec![R::zero(); c];
                for row in 0..bsz * c {
                    let ch = row % c;
                    let grow = &gd[row * t..(row + 1) * t];
                    let xrow = &xd[row * t..(row + 1) * t];
                    gb[ch] += grow.iter().copied().sum::<R>();
                    for k in 0..taps {
                        let off = k as isize - half;
                        let lo = (-off).max(0) as usize;
                        let hi = (t as isize - off).min(t as isize).max(0) as usize;
                        let mut acc = R::zero();
                        for i in lo..hi {
                            let j = (i as isize + off) as usize;
                            acc += grow[i] * xrow[j];
                            if let Some(gx) = gx.as_mut() {
                                gx[row * t + j] += grow[i] * wd[ch * taps + k];
                            }
                        }
                        gw[ch * taps + k] += acc;
                    }
                }
                Ok(vec![
                    gx.map(|v| Tensor::from_parts(xs.clone(), v)),
                    needs[1].then(|| Tensor::from_parts(vec![c, taps], gw)),
                    needs[2].then(|| Tensor::from_parts(vec![c], gb)),
                ])
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], d: usize, same: bool) -> Tensor<f64> {
        let (bs, ci, t) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, k) = (w.dim(0), w.dim(2));
        let pad = if same { d * (k - 1) / 2 } else { 0 };
        let t_out = if same { t } else { t - d * (k - 1) };
        let mut out = Tensor::zeros(&[bs, co, t_out]);
        for bi in 0..bs {
            for o in 0..co {
                for to in 0..t_out {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for kk in 0..k {
                            let ti = to as isize + (kk * d) as isize - pad as isize;
                            if ti >= 0 && (ti as usize) < t {
                                acc += w.data()[(o * ci + i) * k + kk] * x.data()[(bi * ci + i) * t + ti as usize];
                            }
                        }
                    }
                    out.data_mut()[(bi * co + o) * t_out + to] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 2, 8], &mut rng);
        let w = rand_tensor(&[3, 2, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let tape = Tape::no_grad();
        for padding in [Padding::Same, Padding::Valid] {
            let y = tape
                .conv1d(
                    &tape.constant(x.clone()),
                    &tape.constant(w.clone()),
                    Some(&tape.constant(b.clone())),
                    2,
                    padding,
                )
                .unwrap();
            let want = conv_oracle(&x, &w, b.data(), 2, padding == Padding::Same);
            assert_eq!(y.shape(), want.shape());
            for (a, e) in y.value().data().iter().zip(want.data()) {
                assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn identity_kernel_and_zero_input() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| i as f32 * 0.1));
        let eye = tape.constant(Tensor::<f32>::eye(3).reshape(&[3, 3, 1]).unwrap());
        let y = tape.conv1d(&x, &eye, None, 4, Padding::Same).unwrap();
        assert_eq!(y.value(), x.value());

        let z = tape.constant(Tensor::zeros(&[1, 2, 6]));
        let w = tape.constant(Tensor::full(&[3, 2, 3], 0.7));
        let b = tape.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.conv1d(&z, &w, Some(&b), 1, Padding::Same).unwrap();
        for (o, row) in y.value().data().chunks(6).enumerate() {
            assert!(row.iter().all(|v| *v == b.value().data()[o]));
        }
    }

    #[test]
    fn argument_errors() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(
            tape.conv1d(&x, &w, None, 1, Padding::Same),
            Err(Error::Dimension { .. })
        ));
        let w = tape.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(
            tape.conv1d(&x, &w, None, 2, Padding::Valid),
            Err(Error::Argument(_))
        ));
        let w = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(
            tape.conv1d(&x, &w, None, 1, Padding::Same),
            Err(Error::Argument(_))
        ));
        let nonsquare = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.channel_mix(&x, &nonsquare), Err(Error::Argument(_))));
    }

    #[test]
    fn channel_mix_matches_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[2, 4, 7], &mut rng);
        let w = rand_tensor(&[4, 4], &mut rng);
        let tape = Tape::no_grad();
        let y = tape
            .channel_mix(&tape.constant(x.clone()), &tape.constant(w.clone()))
            .unwrap();
        for b in 0..2 {
            for t in 0..7 {
                for o in 0..4 {
                    let want: f64 = (0..4)
                        .map(|i| w.data()[o * 4 + i] * x.data()[(b * 4 + i) * 7 + t])
                        .sum();
                    let got = y.value().data()[(b * 4 + o) * 7 + t];
                    assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
                }
            }
        }
        let two = tape.constant(Tensor::<f64>::eye(4).map(|v| 2.0 * v));
        let y2 = tape.channel_mix(&tape.constant(x.clone()), &two).unwrap();
        assert!(y2.value().data().iter().zip(x.data()).all(|(a, b)| *a == 2.0 * b));
    }

    #[test]
    fn tiling_does_not_change_results() {
        // longer than one tile, single batch item: the tiled and untiled paths must agree bitwise
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = TIME_TILE * 2 + 37;
        let x = Tensor::<f32>::from_fn(&[1, 3, t], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::no_grad();
        let y = tape
            .conv1d(
                &tape.constant(x.clone()),
                &tape.constant(w.clone()),
                None,
                5,
                Padding::Same,
            )
            .unwrap();
        let geo = ConvGeom {
            batch: 1,
            c_in: 3,
            c_out: 2,
            taps: 3,
            dilation: 5,
            t_in: t,
            t_out: t,
            pad: 5,
        };
        let whole = forward_tile(&geo, x.data(), w.data(), None, 0, 0, t);
        assert_eq!(y.value().data(), &whole[..]);
    }

    #[test]
    fn depthwise_matches_direct_sum() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(&[1, 3], vec![1.0, 10.0, 100.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let y = tape.depthwise_conv1d(&x, &w, &b).unwrap();
        assert_eq!(y.value().data(), &[210.5, 321.5, 432.5, 43.5]);
    }
}
