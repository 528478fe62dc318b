//! Non-causal dilated-convolution refinement of the flow output.
//!
//! `x̂ = x̃ + r(x̃, c)` where `r` is a gated convolution stack (dilations
//! `1, 2, 4, ...`) conditioned on the mel spectrogram upsampled to the sample
//! rate, followed by a two-layer head whose last layer starts at zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, GatedStack, Upsampler};
use crate::par;
use crate::real::Real;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PostFilterConfig {
    pub n_layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub n_mels: usize,
    pub hop_size: usize,
}

impl Default for PostFilterConfig {
    fn default() -> Self {
        PostFilterConfig {
            n_layers: 7,
            channels: 64,
            kernel_size: 3,
            n_mels: 80,
            hop_size: 200,
        }
    }
}

impl PostFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("pf_layers", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("pf_channels", "must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("pf_kernel_size", "must be odd"));
        }
        if self.n_mels == 0 || self.hop_size == 0 {
            return Err(Error::config("n_mels", "n_mels and hop_size must be positive"));
        }
        Ok(())
    }

    /// `1 + (kernel - 1) * Σ_l 2^l`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * ((1usize << self.n_layers) - 1)
    }
}

pub struct PostFilter {
    pub cfg: PostFilterConfig,
    upsampler: Upsampler,
    stack: GatedStack,
    head: [Conv; 2],
}

impl PostFilter {
    pub fn new<R: Real>(cfg: PostFilterConfig, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let upsampler = Upsampler::new(store, "pf.upsampler", cfg.n_mels, cfg.hop_size, 3);
        let stack = GatedStack::new(store, "pf", 1, c, cfg.n_layers, cfg.kernel_size, cfg.n_mels, rng);
        let head = [
            Conv::new(store, "pf.head.0", c, c, 1, 1, rng),
            Conv::zeros(store, "pf.head.1", 1, c, 1),
        ];
        Ok(PostFilter {
            cfg,
            upsampler,
            stack,
            head,
        })
    }

    pub fn receptive_field(&self) -> usize {
        self.stack.receptive_field()
    }

    /// Samples of context needed on each side of an output sample.
    pub fn halo(&self) -> usize {
        (self.receptive_field() - 1) / 2
    }

    /// Last head layer; zero at initialisation.
    pub fn output_conv(&self) -> Conv {
        self.head[1]
    }

    /// Mel `[B, n_mels, F]` upsampled to `len` samples: `[B, n_mels, len]`.
    pub fn upsample<R: Real>(&self, tape: &Tape<R>, p: &Bound<R>, mel: &Var<R>, len: usize) -> Result<Var<R>> {
        if mel.shape().len() != 3 || mel.shape()[1] != self.cfg.n_mels {
            return Err(Error::dim(
                "postfilter condition",
                format!("expected [B, {}, F], got {:?}", self.cfg.n_mels, mel.shape()),
            ));
        }
        self.upsampler.apply(tape, p, mel, len)
    }

    /// Refine `x̃ [B, T]` given an already upsampled condition `[B, n_mels, T]`.
    pub fn apply_upsampled<R: Real>(&self, tape: &Tape<R>, p: &Bound<R>, x: &Var<R>, cond: &Var<R>) -> Result<Var<R>> {
        let s = x.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::dim("postfilter", format!("expected [B, T], got {s:?}")));
        }
        if cond.shape() != [s[0], self.cfg.n_mels, s[1]] {
            return Err(Error::arg(format!(
                "condition {:?} does not cover signal {s:?}",
                cond.shape()
            )));
        }
        let terms = self.stack.condition(tape, p, cond)?;
        let x3 = tape.reshape(x, &[s[0], 1, s[1]])?;
        let skip = self.stack.apply(tape, p, &x3, &terms)?;
        let h = self.head[0].apply(tape, p, &tape.relu(&skip)?)?;
        let r = self.head[1].apply(tape, p, &tape.relu(&h)?)?;
        tape.add(x, &tape.reshape(&r, &s)?)
    }

    /// Refine `x̃ [B, T]` conditioned on mel `[B, n_mels, F]` with `F * hop >= T`.
    pub fn apply<R: Real>(&self, tape: &Tape<R>, p: &Bound<R>, x: &Var<R>, mel: &Var<R>) -> Result<Var<R>> {
        if x.shape().len() != 2 || mel.shape().first() != x.shape().first() {
            return Err(Error::arg(format!(
                "signal {:?} and condition {:?} are not aligned",
                x.shape(),
                mel.shape()
            )));
        }
        let cond = self.upsample(tape, p, mel, x.shape()[1])?;
        self.apply_upsampled(tape, p, x, &cond)
    }

    /// Inference in chunks of `chunk` samples with a receptive-field halo on each side.
    /// Chunks run in parallel; the result equals [`PostFilter::apply`] exactly.
    pub fn apply_chunked<R: Real>(
        &self,
        store: &ParamStore<R>,
        x: &Tensor<R>,
        mel: &Tensor<R>,
        chunk: usize,
    ) -> Result<Tensor<R>> {
        if chunk == 0 {
            return Err(Error::arg("chunk size must be positive"));
        }
        let s = x.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::dim("postfilter", format!("expected [B, T], got {s:?}")));
        }
        let (batch, len) = (s[0], s[1]);
        let cond = {
            let tape = Tape::no_grad();
            let p = store.bind(&tape);
            self.upsample(&tape, &p, &tape.constant(mel.clone()), len)?
                .value()
                .clone()
        };
        let halo = self.halo();
        let n_chunks = len.div_ceil(chunk);
        let nm = self.cfg.n_mels;
        let pieces = par::map_range(batch * n_chunks, |i| -> Result<Vec<R>> {
            let (b, c) = (i / n_chunks, i % n_chunks);
            let (start, end) = (c * chunk, ((c + 1) * chunk).min(len));
            let (lo, hi) = (start.saturating_sub(halo), (end + halo).min(len));
            let w = hi - lo;
            let xs = Tensor::new(&[1, w], x.data()[b * len + lo..b * len + hi].to_vec())?;
            let cs = Tensor::from_fn(&[1, nm, w], |j| {
                let (m, t) = (j / w, j % w);
                cond.data()[(b * nm + m) * len + lo + t]
            });
            let tape = Tape::no_grad();
            let p = store.bind(&tape);
            let out = self.apply_upsampled(&tape, &p, &tape.constant(xs), &tape.constant(cs))?;
            Ok(out.value().data()[start - lo..end - lo].to_vec())
        });
        let mut out = Vec::with_capacity(batch * len);
        for piece in pieces {
            out.extend(piece?);
        }
        Tensor::new(&[batch, len], out)
    }
}
