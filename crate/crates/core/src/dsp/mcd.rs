use std::f64::consts::{LN_10, PI};
use std::sync::Arc;

use crate::dsp::loss::LOG_FLOOR;
use crate::dsp::mel::{log_mel, MelFilterbank};
use crate::dsp::stft::StftConfig;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MCD_MELS: usize = 34;
pub const MCD_CEPSTRA: usize = 13;

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct2(v: &[f64], n_out: usize) -> Vec<f64> {
    let n = v.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = v
                .iter()
                .enumerate()
                .map(|(m, x)| x * (PI * k as f64 * (m as f64 + 0.5) / n).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

/// Per-frame mel cepstra `c_0..=c_{n_cepstra}` of a mono signal.
pub fn mel_cepstra<R: Real>(
    signal: &Tensor<R>,
    cfg: &StftConfig,
    fb: &Arc<MelFilterbank<R>>,
    n_cepstra: usize,
) -> Result<Vec<Vec<f64>>> {
    if n_cepstra == 0 || n_cepstra >= fb.n_mels {
        return Err(Error::arg(format!(
            "n_cepstra must be in 1..{} for {} mel bands",
            fb.n_mels, fb.n_mels
        )));
    }
    let lm = log_mel(signal, cfg, fb, LOG_FLOOR)?;
    let (nm, frames) = (lm.shape()[0], lm.shape()[1]);
    Ok((0..frames)
        .map(|f| {
            let col: Vec<f64> = (0..nm).map(|m| lm.data()[m * frames + f].as_f64()).collect();
            dct2(&col, n_cepstra + 1)
        })
        .collect())
}

/// Mean over frames of `(10 / ln 10) · sqrt(2 Σ_{k=1..n} (c_k − ĉ_k)²)`; `c_0` is ignored.
pub fn mcd_from_cepstra(c: &[Vec<f64>], chat: &[Vec<f64>], n_cepstra: usize) -> Result<f64> {
    if c.len() != chat.len() || c.is_empty() {
        return Err(Error::dim("mcd", format!("{} vs {} frames", c.len(), chat.len())));
    }
    let mut total = 0.0;
    for (a, b) in c.iter().zip(chat) {
        if a.len() <= n_cepstra || b.len() <= n_cepstra {
            return Err(Error::dim("mcd", format!("need {} cepstra per frame", n_cepstra + 1)));
        }
        let d: f64 = (1..=n_cepstra).map(|k| (a[k] - b[k]).powi(2)).sum();
        total += (2.0 * d).sqrt();
    }
    Ok(10.0 / LN_10 * total / c.len() as f64)
}

/// Mel cepstral distortion in dB between two equal-length mono signals.
pub fn mcd<R: Real>(
    x: &Tensor<R>,
    xhat: &Tensor<R>,
    cfg: &StftConfig,
    fb: &Arc<MelFilterbank<R>>,
    n_cepstra: usize,
) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::dim("mcd", format!("{:?} vs {:?}", x.shape(), xhat.shape())));
    }
    let c = mel_cepstra(x, cfg, fb, n_cepstra)?;
    let chat = mel_cepstra(xhat, cfg, fb, n_cepstra)?;
    mcd_from_cepstra(&c, &chat, n_cepstra)
}
