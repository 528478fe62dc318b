use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::dsp::mel::{mel_from_magnitude, MelFilterbank};
use crate::dsp::stft::{stft_magnitude, StftConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Magnitudes are floored here before taking logs.
pub const LOG_FLOOR: f64 = 1e-5;

/// One STFT parameter set of the multi-resolution loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Resolution {
    pub stft: StftConfig,
    pub n_mels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiResLossConfig {
    pub resolutions: Vec<Resolution>,
}

impl MultiResLossConfig {
    pub fn new(resolutions: Vec<Resolution>) -> Result<Self> {
        let cfg = MultiResLossConfig { resolutions };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Five resolutions from FFT 4096 down to 256, with hop = win / 4 and halving mel counts.
    pub fn five_band() -> Self {
        let r = |fft, hop, win, n_mels| Resolution {
            stft: StftConfig::new(fft, hop, win).expect("valid"),
            n_mels,
        };
        MultiResLossConfig {
            resolutions: vec![
                r(4096, 400, 1600, 640),
                r(2048, 200, 800, 320),
                r(1024, 100, 400, 160),
                r(512, 50, 200, 80),
                r(256, 25, 100, 40),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::arg("multi-resolution loss needs at least one resolution"));
        }
        for (i, r) in self.resolutions.iter().enumerate() {
            r.stft.validate().map_err(|e| Error::Resolution {
                index: i,
                source: Box::new(e),
            })?;
            if r.n_mels == 0 {
                return Err(Error::Resolution {
                    index: i,
                    source: Box::new(Error::arg("n_mels must be positive")),
                });
            }
            if self.resolutions[..i].contains(r) {
                return Err(Error::arg(format!("resolution {i} duplicates an earlier entry")));
            }
        }
        Ok(())
    }

    /// Longest reflect padding any member needs; signals must be longer than this.
    pub fn min_len(&self) -> usize {
        self.resolutions.iter().map(|r| r.stft.pad() + 1).max().unwrap_or(1)
    }
}

/// `fft/hop/win/mels` entries separated by commas.
impl FromStr for MultiResLossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let nums: Vec<usize> = part
                .split('/')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::arg(format!("bad resolution `{part}`: {e}")))?;
            let [fft, hop, win, n_mels] = nums[..] else {
                return Err(Error::arg(format!("resolution `{part}` must be fft/hop/win/mels")));
            };
            out.push(Resolution {
                stft: StftConfig::new(fft, hop, win)?,
                n_mels,
            });
        }
        MultiResLossConfig::new(out)
    }
}

impl fmt::Display for MultiResLossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.resolutions.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(
                f,
                "{}/{}/{}/{}",
                r.stft.fft_size, r.stft.hop_size, r.stft.win_size, r.n_mels
            )?;
        }
        Ok(())
    }
}

/// A [`MultiResLossConfig`] with its filterbanks built for one sample rate.
#[derive(Clone, Debug)]
pub struct MultiResLoss<R> {
    pub config: MultiResLossConfig,
    banks: Vec<Arc<MelFilterbank<R>>>,
}

impl<R: Real> MultiResLoss<R> {
    pub fn new(config: MultiResLossConfig, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        config.validate()?;
        let banks = config
            .resolutions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                MelFilterbank::slaney(r.n_mels, r.stft.fft_size, sample_rate, fmin, fmax)
                    .map(Arc::new)
                    .map_err(|e| Error::Resolution {
                        index: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        Ok(MultiResLoss { config, banks })
    }

    pub fn banks(&self) -> &[Arc<MelFilterbank<R>>] {
        &self.banks
    }
}

fn check_pair<R: Real>(op: &'static str, x: &Var<R>, xhat: &Var<R>) -> Result<()> {
    if x.shape() != xhat.shape() {
        return Err(Error::dim(
            op,
            format!("reference {:?} and estimate {:?} differ", x.shape(), xhat.shape()),
        ));
    }
    Ok(())
}

/// View `[F, K]` as `[1, F, K]` so per-item reductions see a batch axis.
fn batched<R: Real>(tape: &Tape<R>, m: &Var<R>) -> Result<Var<R>> {
    if m.shape().len() == 2 {
        let s = m.shape();
        tape.reshape(m, &[1, s[0], s[1]])
    } else {
        Ok(m.clone())
    }
}

/// Per-item Euclidean norm `[B, ...] -> [B]`, with a zero subgradient at the origin.
fn norm_per_item<R: Real>(tape: &Tape<R>, x: &Var<R>) -> Result<Var<R>> {
    let b = x.shape()[0];
    let per = x.value().numel() / b.max(1);
    let norms: Vec<R> = x
        .value()
        .data()
        .chunks(per.max(1))
        .map(|c| c.iter().fold(R::zero(), |a, &v| a + v * v).sqrt())
        .collect();
    let xv = x.shared();
    let norms_c = norms.clone();
    tape.record(Tensor::new(&[b], norms)?, &[x], move |g, _| {
        let mut out = Tensor::zeros(xv.shape());
        for (i, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            let n = norms_c[i];
            if n > R::zero() {
                let s = g.data()[i] / n;
                for (o, &v) in chunk.iter_mut().zip(&xv.data()[i * per..(i + 1) * per]) {
                    *o = s * v;
                }
            }
        }
        Ok(vec![Some(out)])
    })
}

/// `‖M − M̂‖_F / ‖M‖_F` per item, averaged over the batch.
pub fn sc_from_magnitudes<R: Real>(tape: &Tape<R>, m: &Var<R>, mhat: &Var<R>) -> Result<Var<R>> {
    check_pair("spectral convergence", m, mhat)?;
    let (m, mhat) = (batched(tape, m)?, batched(tape, mhat)?);
    let den = norm_per_item(tape, &m)?;
    if den.value().data().iter().any(|&v| v == R::zero()) {
        return Err(Error::Domain {
            op: "spectral convergence",
            detail: "reference spectrogram has zero energy".into(),
        });
    }
    let num = norm_per_item(tape, &tape.sub(&m, &mhat)?)?;
    tape.mean(&tape.div(&num, &den)?)
}

/// Mean absolute difference of floored natural-log magnitudes.
pub fn log_l1_from_magnitudes<R: Real>(tape: &Tape<R>, m: &Var<R>, mhat: &Var<R>) -> Result<Var<R>> {
    check_pair("log magnitude", m, mhat)?;
    let floor = R::of(LOG_FLOOR);
    let lm = tape.log(&tape.clamp_min(m, floor)?)?;
    let lmhat = tape.log(&tape.clamp_min(mhat, floor)?)?;
    tape.mean(&tape.abs(&tape.sub(&lm, &lmhat)?)?)
}

fn check_energy<R: Real>(x: &Var<R>) -> Result<()> {
    let len = *x.shape().last().unwrap_or(&0);
    for item in x.value().data().chunks(len.max(1)) {
        if item.iter().all(|&v| v == R::zero()) {
            return Err(Error::Domain {
                op: "spectral convergence",
                detail: "reference signal has zero energy".into(),
            });
        }
    }
    Ok(())
}

/// Spectral convergence between a reference `x` and an estimate `xhat` (`[T]` or `[B, T]`).
pub fn loss_sc<R: Real>(tape: &Tape<R>, x: &Var<R>, xhat: &Var<R>, cfg: &StftConfig) -> Result<Var<R>> {
    check_pair("loss_sc", x, xhat)?;
    check_energy(x)?;
    let m = stft_magnitude(tape, x, cfg)?;
    let mhat = stft_magnitude(tape, xhat, cfg)?;
    sc_from_magnitudes(tape, &m, &mhat)
}

/// Log STFT-magnitude L1 loss.
pub fn loss_mag<R: Real>(tape: &Tape<R>, x: &Var<R>, xhat: &Var<R>, cfg: &StftConfig) -> Result<Var<R>> {
    check_pair("loss_mag", x, xhat)?;
    let m = stft_magnitude(tape, x, cfg)?;
    let mhat = stft_magnitude(tape, xhat, cfg)?;
    log_l1_from_magnitudes(tape, &m, &mhat)
}

/// Log mel-magnitude L1 loss.
pub fn loss_mel<R: Real>(
    tape: &Tape<R>,
    x: &Var<R>,
    xhat: &Var<R>,
    cfg: &StftConfig,
    fb: &Arc<MelFilterbank<R>>,
) -> Result<Var<R>> {
    check_pair("loss_mel", x, xhat)?;
    if fb.fft_size != cfg.fft_size {
        return Err(Error::arg(format!(
            "filterbank built for FFT size {}, STFT uses {}",
            fb.fft_size, cfg.fft_size
        )));
    }
    let m = mel_from_magnitude(tape, &stft_magnitude(tape, x, cfg)?, fb)?;
    let mhat = mel_from_magnitude(tape, &stft_magnitude(tape, xhat, cfg)?, fb)?;
    log_l1_from_magnitudes(tape, &m, &mhat)
}

/// Sum of the three spectral terms at one resolution, sharing the STFTs.
fn resolution_terms<R: Real>(
    tape: &Tape<R>,
    x: &Var<R>,
    xhat: &Var<R>,
    cfg: &StftConfig,
    fb: &Arc<MelFilterbank<R>>,
) -> Result<Var<R>> {
    let m = stft_magnitude(tape, x, cfg)?;
    let mhat = stft_magnitude(tape, xhat, cfg)?;
    let sc = sc_from_magnitudes(tape, &m, &mhat)?;
    let mag = log_l1_from_magnitudes(tape, &m, &mhat)?;
    let mel = log_l1_from_magnitudes(
        tape,
        &mel_from_magnitude(tape, &m, fb)?,
        &mel_from_magnitude(tape, &mhat, fb)?,
    )?;
    tape.add(&tape.add(&sc, &mag)?, &mel)
}

/// Mean over resolutions of `L_sc + L_mag + L_mel`. Errors carry the failing resolution index.
pub fn loss_multires<R: Real>(tape: &Tape<R>, x: &Var<R>, xhat: &Var<R>, loss: &MultiResLoss<R>) -> Result<Var<R>> {
    check_pair("loss_multires", x, xhat)?;
    check_energy(x)?;
    let mut total: Option<Var<R>> = None;
    for (i, (r, fb)) in loss.config.resolutions.iter().zip(&loss.banks).enumerate() {
        let term = resolution_terms(tape, x, xhat, &r.stft, fb).map_err(|e| Error::Resolution {
            index: i,
            source: Box::new(e),
        })?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term)?,
        });
    }
    let m = loss.config.resolutions.len();
    tape.scale(&total.expect("at least one resolution"), R::of(1.0 / m as f64))
}

/// Evaluate a loss on plain tensors without recording gradients.
pub fn evaluate<R, F>(x: &Tensor<R>, xhat: &Tensor<R>, f: F) -> Result<R>
where
    R: Real,
    F: FnOnce(&Tape<R>, &Var<R>, &Var<R>) -> Result<Var<R>>,
{
    let tape = Tape::no_grad();
    let (a, b) = (tape.constant(x.clone()), tape.constant(xhat.clone()));
    f(&tape, &a, &b)?.item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(n: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(&[n], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn identical_inputs_give_zero() {
        let cfg = StftConfig::new(64, 16, 64).unwrap();
        let fb = Arc::new(MelFilterbank::slaney(10, 64, 16000, 0.0, 8000.0).unwrap());
        let x = sig(400, 1);
        assert_eq!(evaluate(&x, &x, |t, a, b| loss_sc(t, a, b, &cfg)).unwrap(), 0.0);
        assert_eq!(evaluate(&x, &x, |t, a, b| loss_mag(t, a, b, &cfg)).unwrap(), 0.0);
        assert_eq!(evaluate(&x, &x, |t, a, b| loss_mel(t, a, b, &cfg, &fb)).unwrap(), 0.0);
    }

    #[test]
    fn zero_estimate_gives_unit_sc() {
        let cfg = StftConfig::new(64, 16, 64).unwrap();
        let x = sig(400, 2);
        let v = evaluate(&x, &Tensor::zeros(&[400]), |t, a, b| loss_sc(t, a, b, &cfg)).unwrap();
        assert!((v - 1.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn zero_reference_is_reported() {
        let cfg = StftConfig::new(64, 16, 64).unwrap();
        let x = sig(400, 2);
        let r = evaluate(&Tensor::zeros(&[400]), &x, |t, a, b| loss_sc(t, a, b, &cfg));
        assert!(matches!(r, Err(Error::Domain { .. })));
    }

    #[test]
    fn sc_detects_scale() {
        let cfg = StftConfig::new(64, 16, 64).unwrap();
        let x = sig(400, 3);
        for alpha in [0.0, 0.5, 2.0] {
            let v = evaluate(&x, &x.map(|v| v * alpha), |t, a, b| loss_sc(t, a, b, &cfg)).unwrap();
            assert!((v - (1.0f64 - alpha).abs()).abs() < 1e-5);
        }
    }

    #[test]
    fn log_ratio_of_e_is_one() {
        let tape = Tape::<f64>::no_grad();
        let m = Tensor::from_fn(&[5, 7], |i| 0.01 + i as f64);
        let mhat = m.map(|v| v * std::f64::consts::E);
        let v = log_l1_from_magnitudes(&tape, &tape.constant(m), &tape.constant(mhat)).unwrap();
        assert!((v.item().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_are_dimension_errors() {
        let cfg = StftConfig::new(64, 16, 64).unwrap();
        let r = evaluate(&sig(400, 1), &sig(401, 1), |t, a, b| loss_mag(t, a, b, &cfg));
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn config_parse_round_trip() {
        let cfg = MultiResLossConfig::five_band();
        let s = cfg.to_string();
        assert_eq!(
            s,
            "4096/400/1600/640,2048/200/800/320,1024/100/400/160,512/50/200/80,256/25/100/40"
        );
        assert_eq!(s.parse::<MultiResLossConfig>().unwrap(), cfg);
        assert!("".parse::<MultiResLossConfig>().is_err());
        assert!("64/16/64/8,64/16/64/8".parse::<MultiResLossConfig>().is_err());
        assert!("64/16/64".parse::<MultiResLossConfig>().is_err());
    }

    #[test]
    fn resolution_errors_carry_index() {
        let cfg: MultiResLossConfig = "64/16/64/8,512/64/256/16".parse().unwrap();
        let loss = MultiResLoss::<f64>::new(cfg, 16000, 0.0, 8000.0).unwrap();
        let x = sig(200, 1);
        let r = evaluate(&x, &x, |t, a, b| loss_multires(t, a, b, &loss));
        match r {
            Err(Error::Resolution { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }
}
