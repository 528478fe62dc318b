use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Floor under `re² + im²` so the magnitude is differentiable at zero.
pub const MAG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Window {
    /// Periodic Hann.
    Hann,
    /// All ones over `win_size`; used to check the transform against closed forms.
    Rectangular,
}

/// Short-time Fourier transform parameters.
///
/// The signal is reflect-padded by `fft_size / 2` on both sides, so frame `f` is
/// centred on sample `f * hop_size` and a length-`T` signal yields
/// `1 + T / hop_size` frames. The window sits in the middle of the FFT frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop_size: usize, win_size: usize) -> Result<Self> {
        let cfg = StftConfig {
            fft_size,
            hop_size,
            win_size,
            window: Window::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.hop_size == 0 || self.win_size == 0 {
            return Err(Error::arg(format!("STFT sizes must be positive: {self:?}")));
        }
        if self.win_size > self.fft_size {
            return Err(Error::arg(format!(
                "window {} longer than FFT {}",
                self.win_size, self.fft_size
            )));
        }
        if self.hop_size > self.win_size {
            return Err(Error::arg(format!(
                "hop {} longer than window {}",
                self.hop_size, self.win_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.fft_size / 2
    }

    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop_size
    }

    /// Errors unless a signal of `len` samples can be reflect-padded.
    pub fn check_length(&self, len: usize) -> Result<()> {
        self.validate()?;
        if len == 0 {
            return Err(Error::arg("empty signal"));
        }
        if len <= self.pad() {
            return Err(Error::arg(format!(
                "signal of {len} samples is too short for FFT size {} (needs more than {})",
                self.fft_size,
                self.pad()
            )));
        }
        Ok(())
    }

    /// First index of the window inside an FFT frame.
    pub fn window_offset(&self) -> usize {
        (self.fft_size - self.win_size) / 2
    }

    /// Window coefficients over `win_size` samples.
    pub fn window_coeffs<R: Real>(&self) -> Vec<R> {
        match self.window {
            Window::Rectangular => vec![R::one(); self.win_size],
            Window::Hann => {
                let n = self.win_size as f64;
                (0..self.win_size)
                    .map(|i| R::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
                    .collect()
            }
        }
    }
}

/// Map an index into the padded signal back to the original signal.
pub(crate) fn reflect_index(i: usize, pad: usize, len: usize) -> usize {
    if i < pad {
        pad - i
    } else if i - pad >= len {
        2 * (len - 1) - (i - pad)
    } else {
        i - pad
    }
}

struct Layout {
    batch: usize,
    len: usize,
    frames: usize,
    bins: usize,
}

fn layout(shape: &[usize], cfg: &StftConfig) -> Result<Layout> {
    let (batch, len) = match *shape {
        [t] => (1, t),
        [b, t] => (b, t),
        _ => {
            return Err(Error::dim(
                "stft",
                format!("signal must be [T] or [B, T], got {shape:?}"),
            ))
        }
    };
    if batch == 0 {
        return Err(Error::arg("empty batch"));
    }
    cfg.check_length(len)?;
    Ok(Layout {
        batch,
        len,
        frames: cfg.n_frames(len),
        bins: cfg.n_bins(),
    })
}

/// Complex spectra for every frame, laid out `[batch, frame, bin]`.
fn analyze<R: Real>(x: &[R], lay: &Layout, cfg: &StftConfig) -> Vec<Complex<R>> {
    let fft = FftPlanner::<R>::new().plan_fft_forward(cfg.fft_size);
    let win = cfg.window_coeffs::<R>();
    let (off, pad) = (cfg.window_offset(), cfg.pad());
    let per_frame = par::map_range(lay.batch * lay.frames, |idx| {
        let (b, f) = (idx / lay.frames, idx % lay.frames);
        let sig = &x[b * lay.len..(b + 1) * lay.len];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); cfg.fft_size];
        let start = f * cfg.hop_size + off;
        for (i, &w) in win.iter().enumerate() {
            buf[off + i].re = w * sig[reflect_index(start + i, pad, lay.len)];
        }
        fft.process(&mut buf);
        buf.truncate(lay.bins);
        buf
    });
    per_frame.into_iter().flatten().collect()
}

fn magnitude<R: Real>(c: Complex<R>) -> R {
    (c.re * c.re + c.im * c.im + R::of(MAG_EPS)).sqrt()
}

/// Gradient of the magnitudes with respect to the signal.
///
/// For one frame, `d|X_k| / d s_n = Re(X_k e^{2πikn/N}) / |X_k|`, so the frame
/// gradient is the real part of an unnormalised inverse FFT of
/// `G_k X_k / |X_k|` over the non-negative bins, times the window.
fn synthesize_grad<R: Real>(g: &[R], spectra: &[Complex<R>], mags: &[R], lay: &Layout, cfg: &StftConfig) -> Vec<R> {
    let ifft = FftPlanner::<R>::new().plan_fft_inverse(cfg.fft_size);
    let win = cfg.window_coeffs::<R>();
    let (off, pad) = (cfg.window_offset(), cfg.pad());
    let per_item = par::map_range(lay.batch, |b| {
        let mut padded = vec![R::zero(); lay.len + 2 * pad];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); cfg.fft_size];
        for f in 0..lay.frames {
            let base = (b * lay.frames + f) * lay.bins;
            buf.iter_mut().for_each(|c| *c = Complex::new(R::zero(), R::zero()));
            for k in 0..lay.bins {
                let gk = g[base + k];
                if gk != R::zero() {
                    buf[k] = spectra[base + k] * (gk / mags[base + k]);
                }
            }
            ifft.process(&mut buf);
            let start = f * cfg.hop_size + off;
            for (i, &w) in win.iter().enumerate() {
                padded[start + i] += w * buf[off + i].re;
            }
        }
        let mut out = vec![R::zero(); lay.len];
        for (i, &v) in padded.iter().enumerate() {
            out[reflect_index(i, pad, lay.len)] += v;
        }
        out
    });
    per_item.into_iter().flatten().collect()
}

/// Differentiable STFT magnitude: `[T] -> [frames, bins]` or `[B, T] -> [B, frames, bins]`.
pub fn stft_magnitude<R: Real>(tape: &Tape<R>, x: &Var<R>, cfg: &StftConfig) -> Result<Var<R>> {
    let lay = layout(x.shape(), cfg)?;
    let spectra = analyze(x.value().data(), &lay, cfg);
    let mags: Vec<R> = spectra.iter().map(|&c| magnitude(c)).collect();
    let shape = if x.shape().len() == 1 {
        vec![lay.frames, lay.bins]
    } else {
        vec![lay.batch, lay.frames, lay.bins]
    };
    let out = Arc::new(Tensor::new(&shape, mags)?);
    let out_in_closure = Arc::clone(&out);
    let in_shape = x.shape().to_vec();
    let cfg = *cfg;
    tape.record_shared(out, &[x], move |g, _| {
        let gx = synthesize_grad(g.data(), &spectra, out_in_closure.data(), &lay, &cfg);
        Ok(vec![Some(Tensor::new(&in_shape, gx)?)])
    })
}

/// Magnitude spectrogram of a plain tensor.
pub fn spectrogram<R: Real>(x: &Tensor<R>, cfg: &StftConfig) -> Result<Tensor<R>> {
    let tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    Ok(stft_magnitude(&tape, &v, cfg)?.value().clone())
}
