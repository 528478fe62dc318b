//! Layers shared by the coupling network and the post-filter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Bound, Padding, ParamId, ParamStore, Tape, Tensor, Var};

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for convolution layers.
pub fn uniform_init<R: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| R::of(rng.gen_range(-bound..bound)))
}

/// A same-padded 1-D convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_out: usize,
        c_in: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel;
        Conv {
            weight: store.add(
                format!("{name}.weight"),
                uniform_init(&[c_out, c_in, kernel], fan_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), uniform_init(&[c_out], fan_in, rng)),
            dilation,
        }
    }

    /// Weight and bias start at zero.
    pub fn zeros<R: Real>(store: &mut ParamStore<R>, name: &str, c_out: usize, c_in: usize, kernel: usize) -> Self {
        Conv {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, kernel])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            dilation: 1,
        }
    }

    pub fn apply<R: Real>(&self, tape: &Tape<R>, p: &Bound<R>, x: &Var<R>) -> Result<Var<R>> {
        tape.conv1d(x, &p[self.weight], Some(&p[self.bias]), self.dilation, Padding::Same)
    }
}

/// Frame duplication followed by a per-channel smoothing convolution.
#[derive(Clone, Copy, Debug)]
pub struct Upsampler {
    pub factor: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsampler {
    /// Smoothing kernel starts as a moving average, so constant inputs pass unchanged
    /// away from the edges.
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, channels: usize, factor: usize, kernel: usize) -> Self {
        Upsampler {
            factor,
            weight: store.add(
                format!("{name}.weight"),
                Tensor::full(&[channels, kernel], R::of(1.0 / kernel as f64)),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    /// `[B, C, F] -> [B, C, len]`; needs `F * factor >= len`.
    pub fn apply<R: Real>(&self, tape: &Tape<R>, p: &Bound<R>, frames: &Var<R>, len: usize) -> Result<Var<R>> {
        let s = frames.shape();
        if s.len() != 3 {
            return Err(Error::dim("upsample", format!("expected [B, C, F], got {s:?}")));
        }
        if s[2] * self.factor < len {
            return Err(Error::arg(format!(
                "{} condition frames x {} cover {} samples, {len} needed",
                s[2],
                self.factor,
                s[2] * self.factor
            )));
        }
        let rep = tape.repeat_time(frames, self.factor)?;
        let rep = if rep.shape()[2] == len {
            rep
        } else {
            tape.narrow(&rep, 2, 0, len)?
        };
        tape.depthwise_conv1d(&rep, &p[self.weight], &p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
struct GatedLayer {
    dilated: Conv,
    cond: Conv,
    res_skip: Conv,
}

/// Stack of gated, dilated, non-causal convolution layers with per-layer condition
/// injection. Layer `l` uses dilation `2^l`; its output splits into a residual
/// update and a skip contribution (the last layer only feeds the skip sum).
#[derive(Clone, Debug)]
pub struct GatedStack {
    pub channels: usize,
    pub kernel: usize,
    start: Conv,
    layers: Vec<GatedLayer>,
}

impl GatedStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        in_channels: usize,
        channels: usize,
        n_layers: usize,
        kernel: usize,
        cond_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let start = Conv::new(store, &format!("{name}.start"), channels, in_channels, 1, 1, rng);
        let layers = (0..n_layers)
            .map(|l| {
                let prefix = format!("{name}.layers.{l}");
                let res_out = if l + 1 < n_layers { 2 * channels } else { channels };
                GatedLayer {
                    dilated: Conv::new(
                        store,
                        &format!("{prefix}.dilated"),
                        2 * channels,
                        channels,
                        kernel,
                        1 << l,
                        rng,
                    ),
                    cond: Conv::new(store, &format!("{prefix}.cond"), 2 * channels, cond_channels, 1, 1, rng),
                    res_skip: Conv::new(store, &format!("{prefix}.res_skip"), res_out, channels, 1, 1, rng),
                }
            })
            .collect();
        GatedStack {
            channels,
            kernel,
            start,
            layers,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Samples seen by one output: `1 + (kernel - 1) * Σ 2^l`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.layers.iter().map(|l| l.dilated.dilation).sum::<usize>()
    }

    /// Per-layer condition terms; compute once and reuse for every pass over the same condition.
    pub fn condition<R: Real>(&self, tape: &Tape<R>, p: &Bound<R>, cond: &Var<R>) -> Result<Vec<Var<R>>> {
        self.layers.iter().map(|l| l.cond.apply(tape, p, cond)).collect()
    }

    /// Skip-connection sum `[B, channels, N]` for input `[B, in_channels, N]`.
    pub fn apply<R: Real>(&self, tape: &Tape<R>, p: &Bound<R>, x: &Var<R>, cond: &[Var<R>]) -> Result<Var<R>> {
        if cond.len() != self.layers.len() {
            return Err(Error::arg("one condition term per layer required"));
        }
        let c = self.channels;
        let mut h = self.start.apply(tape, p, x)?;
        let mut skip: Option<Var<R>> = None;
        for (l, (layer, cl)) in self.layers.iter().zip(cond).enumerate() {
            let pre = tape.add(&layer.dilated.apply(tape, p, &h)?, cl)?;
            let acts = tape.gate(&pre)?;
            let rs = layer.res_skip.apply(tape, p, &acts)?;
            let s = if l + 1 < self.layers.len() {
                h = tape.add(&h, &tape.narrow(&rs, 1, 0, c)?)?;
                tape.narrow(&rs, 1, c, c)?
            } else {
                rs
            };
            skip = Some(match skip {
                None => s,
                Some(acc) => tape.add(&acc, &s)?,
            });
        }
        match skip {
            Some(s) => Ok(s),
            None => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn receptive_field_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let s = GatedStack::new(&mut store, "a", 1, 4, 7, 3, 2, &mut rng);
        assert_eq!(s.receptive_field(), 255);
        let s = GatedStack::new(&mut store, "b", 1, 4, 1, 3, 2, &mut rng);
        assert_eq!(s.receptive_field(), 3);
        let s = GatedStack::new(&mut store, "c", 1, 4, 5, 1, 2, &mut rng);
        assert_eq!(s.receptive_field(), 1);
    }

    #[test]
    fn upsampler_duplicates_then_smooths() {
        let mut store = ParamStore::<f64>::new();
        let up = Upsampler::new(&mut store, "up", 1, 3, 3);
        // identity smoothing kernel
        store
            .set(up.weight, Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let mel = tape.constant(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let out = up.apply(&tape, &p, &mel, 5).unwrap();
        assert_eq!(out.value().data(), &[1.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(up.apply(&tape, &p, &mel, 7).is_err());
    }

    #[test]
    fn averaging_kernel_keeps_constants() {
        let mut store = ParamStore::<f64>::new();
        let up = Upsampler::new(&mut store, "up", 2, 4, 3);
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let mel = tape.constant(Tensor::full(&[1, 2, 5], 0.7));
        let out = up.apply(&tape, &p, &mel, 20).unwrap();
        for c in 0..2 {
            for t in 1..19 {
                assert!((out.value().data()[c * 20 + t] - 0.7).abs() < 1e-12);
            }
        }
    }
}
