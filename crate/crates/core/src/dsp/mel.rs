use std::sync::Arc;

use crate::dsp::stft::{stft_magnitude, StftConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> f64 {
    if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    if m < MIN_LOG_MEL {
        m * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (m - MIN_LOG_MEL)).exp()
    }
}

#[derive(Clone, Debug)]
struct Row<R> {
    start: usize,
    weights: Vec<R>,
}

/// Triangular mel filters stored as one contiguous nonzero span per band.
#[derive(Clone, Debug)]
pub struct MelFilterbank<R> {
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub fft_size: usize,
    rows: Vec<Row<R>>,
}

impl<R: Real> MelFilterbank<R> {
    /// Area-normalised Slaney filterbank. Fails if any band would contain no FFT bin.
    pub fn slaney(n_mels: usize, fft_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels == 0 || fft_size < 2 || sample_rate == 0 {
            return Err(Error::arg("mel filterbank needs n_mels, fft_size and sample_rate > 0"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
            return Err(Error::arg(format!(
                "mel range [{fmin}, {fmax}] must satisfy 0 <= fmin < fmax <= {nyquist}"
            )));
        }
        let n_bins = fft_size / 2 + 1;
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut rows = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = ((f - left) / (centre - left))
                    .min((right - f) / (right - centre))
                    .max(0.0);
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(R::of(w * norm));
                } else if start.is_some() {
                    break;
                }
            }
            let start = start.ok_or_else(|| {
                Error::arg(format!(
                    "mel band {m} ({left:.1}-{right:.1} Hz) contains no FFT bin; use fewer bands or a larger FFT"
                ))
            })?;
            rows.push(Row { start, weights });
        }
        Ok(MelFilterbank {
            n_mels,
            sample_rate,
            fmin,
            fmax,
            fft_size,
            rows,
        })
    }

    /// One unit filter per linear bin, so the "mel" spectrogram is the linear one.
    pub fn identity(fft_size: usize, sample_rate: u32) -> Self {
        let n = fft_size / 2 + 1;
        MelFilterbank {
            n_mels: n,
            sample_rate,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            fft_size,
            rows: (0..n)
                .map(|k| Row {
                    start: k,
                    weights: vec![R::one()],
                })
                .collect(),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Dense `[n_mels, n_bins]` weight matrix.
    pub fn dense(&self) -> Tensor<R> {
        let nb = self.n_bins();
        let mut w = Tensor::zeros(&[self.n_mels, nb]);
        for (m, row) in self.rows.iter().enumerate() {
            for (i, &v) in row.weights.iter().enumerate() {
                w.data_mut()[m * nb + row.start + i] = v;
            }
        }
        w
    }

    /// Apply to row-major frames of `n_bins` magnitudes.
    pub fn apply(&self, mags: &[R]) -> Vec<R> {
        let (nb, nm) = (self.n_bins(), self.n_mels);
        let frames = mags.len() / nb;
        let mut out = vec![R::zero(); frames * nm];
        par::for_each_chunk_mut(&mut out, nm, |f, dst| {
            let src = &mags[f * nb..(f + 1) * nb];
            for (d, row) in dst.iter_mut().zip(&self.rows) {
                *d = row
                    .weights
                    .iter()
                    .zip(&src[row.start..])
                    .fold(R::zero(), |acc, (&w, &v)| acc + w * v);
            }
        });
        out
    }

    fn apply_transpose(&self, g: &[R]) -> Vec<R> {
        let (nb, nm) = (self.n_bins(), self.n_mels);
        let frames = g.len() / nm;
        let mut out = vec![R::zero(); frames * nb];
        par::for_each_chunk_mut(&mut out, nb, |f, dst| {
            let src = &g[f * nm..(f + 1) * nm];
            for (&gm, row) in src.iter().zip(&self.rows) {
                for (d, &w) in dst[row.start..].iter_mut().zip(&row.weights) {
                    *d += w * gm;
                }
            }
        });
        out
    }
}

/// Differentiable mel projection of magnitudes `[..., frames, n_bins] -> [..., frames, n_mels]`.
pub fn mel_from_magnitude<R: Real>(tape: &Tape<R>, mag: &Var<R>, fb: &Arc<MelFilterbank<R>>) -> Result<Var<R>> {
    let shape = mag.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != fb.n_bins() {
        return Err(Error::arg(format!(
            "filterbank expects {} bins, magnitudes have shape {shape:?}",
            fb.n_bins()
        )));
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = fb.n_mels;
    let out = fb.apply(mag.value().data());
    let in_shape = shape.to_vec();
    let fb = Arc::clone(fb);
    tape.record(Tensor::new(&out_shape, out)?, &[mag], move |g, _| {
        Ok(vec![Some(Tensor::new(&in_shape, fb.apply_transpose(g.data()))?)])
    })
}

/// Differentiable mel spectrogram of a signal `[T]` or `[B, T]`.
pub fn mel_spectrogram<R: Real>(
    tape: &Tape<R>,
    x: &Var<R>,
    cfg: &StftConfig,
    fb: &Arc<MelFilterbank<R>>,
) -> Result<Var<R>> {
    if fb.fft_size != cfg.fft_size {
        return Err(Error::arg(format!(
            "filterbank built for FFT size {}, STFT uses {}",
            fb.fft_size, cfg.fft_size
        )));
    }
    let mag = stft_magnitude(tape, x, cfg)?;
    mel_from_magnitude(tape, &mag, fb)
}

/// Natural-log mel spectrogram of a mono signal as `[n_mels, frames]`, floored at `floor`.
pub fn log_mel<R: Real>(
    signal: &Tensor<R>,
    cfg: &StftConfig,
    fb: &Arc<MelFilterbank<R>>,
    floor: f64,
) -> Result<Tensor<R>> {
    if signal.ndim() != 1 {
        return Err(Error::dim("log_mel", format!("expected [T], got {:?}", signal.shape())));
    }
    let tape = Tape::no_grad();
    let x = tape.constant(signal.clone());
    let mel = mel_spectrogram(&tape, &x, cfg, fb)?;
    let (frames, nm) = (mel.shape()[0], mel.shape()[1]);
    let floor = R::of(floor);
    let md = mel.value().data();
    Ok(Tensor::from_fn(&[nm, frames], |i| {
        let (m, f) = (i / frames, i % frames);
        md[f * nm + m].max(floor).ln()
    }))
}
