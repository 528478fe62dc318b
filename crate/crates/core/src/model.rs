//! The complete vocoder: flow, post-filter, feature extraction and synthesis.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::dsp::{log_mel, mcd, MelFilterbank, LOG_FLOOR, MCD_CEPSTRA, MCD_MELS};
use crate::error::{Error, Result};
use crate::flow::{aligned_len, Flow};
use crate::postfilter::PostFilter;
use crate::real::Real;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Samples per post-filter chunk at inference time.
pub const PF_CHUNK: usize = 16_384;

/// Per-band mean and standard deviation of the training log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct MelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl MelStats {
    pub fn identity(n_mels: usize) -> Self {
        MelStats {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    /// Statistics over every frame of every `[n_mels, F]` spectrogram.
    pub fn estimate<R: Real>(mels: &[Tensor<R>]) -> Result<Self> {
        let m = mels
            .first()
            .ok_or_else(|| Error::arg("no spectrograms to estimate statistics from"))?
            .shape()[0];
        let mut sum = vec![0.0f64; m];
        let mut sq = vec![0.0f64; m];
        let mut count = 0usize;
        for mel in mels {
            if mel.ndim() != 2 || mel.shape()[0] != m {
                return Err(Error::dim(
                    "mel statistics",
                    format!("expected [{m}, F], got {:?}", mel.shape()),
                ));
            }
            let f = mel.shape()[1];
            for (b, row) in mel.data().chunks(f.max(1)).enumerate() {
                for v in row {
                    let v = v.as_f64();
                    sum[b] += v;
                    sq[b] += v * v;
                }
            }
            count += f;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| ((q / n - mu * mu).max(0.0).sqrt()).max(1e-3) as f32)
            .collect();
        Ok(MelStats {
            mean: mean.into_iter().map(|v| v as f32).collect(),
            std,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.mean.len()
    }

    /// `(mel - mean) / std` per band for `[n_mels, F]` or `[B, n_mels, F]`.
    pub fn normalize<R: Real>(&self, mel: &Tensor<R>) -> Result<Tensor<R>> {
        let s = mel.shape();
        let m = self.n_mels();
        let band_axis = s
            .len()
            .checked_sub(2)
            .ok_or_else(|| Error::dim("normalize", "need a band axis"))?;
        if s[band_axis] != m {
            return Err(Error::dim(
                "normalize",
                format!("condition has {} bands, statistics have {m}", s[band_axis]),
            ));
        }
        let f = s[s.len() - 1];
        let data = mel
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let b = (i / f.max(1)) % m;
                R::of((v.as_f64() - self.mean[b] as f64) / self.std[b] as f64)
            })
            .collect();
        Tensor::new(s, data)
    }
}

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Census {
    pub flow_coupling: usize,
    pub flow_invconv: usize,
    pub flow_upsampler: usize,
    pub postfilter: usize,
    pub total: usize,
}

impl Census {
    pub fn flow(&self) -> usize {
        self.flow_coupling + self.flow_invconv + self.flow_upsampler
    }
}

pub struct Model<R: Real> {
    pub config: Config,
    pub store: ParamStore<R>,
    pub flow: Flow<R>,
    pub postfilter: PostFilter,
    pub mel_stats: MelStats,
    filterbank: Arc<MelFilterbank<R>>,
}

impl<R: Real> Model<R> {
    /// Fresh parameters drawn from a generator seeded with `config.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let flow = Flow::new(config.flow(), &mut store, &mut rng)?;
        let postfilter = PostFilter::new(config.postfilter(), &mut store, &mut rng)?;
        let filterbank = Arc::new(MelFilterbank::slaney(
            config.n_mels,
            config.fft_size,
            config.sample_rate,
            config.fmin,
            config.fmax,
        )?);
        Ok(Model {
            mel_stats: MelStats::identity(config.n_mels),
            config,
            store,
            flow,
            postfilter,
            filterbank,
        })
    }

    pub fn filterbank(&self) -> &Arc<MelFilterbank<R>> {
        &self.filterbank
    }

    pub fn census(&self) -> Census {
        let flow_coupling = self.store.census_prefix("flow.coupling.");
        let flow_upsampler = self.store.census_prefix("flow.upsampler.");
        let flow_total = self.store.census_prefix("flow.");
        let postfilter = self.store.census_prefix("pf.");
        Census {
            flow_coupling,
            flow_invconv: flow_total - flow_coupling - flow_upsampler,
            flow_upsampler,
            postfilter,
            total: self.store.census(),
        }
    }

    /// Natural-log mel spectrogram `[n_mels, F]` of raw audio, before normalisation.
    pub fn log_mel(&self, audio: &[f32]) -> Result<Tensor<R>> {
        let x = Tensor::new(&[audio.len()], audio.iter().map(|&v| R::of(v as f64)).collect())?;
        log_mel(&x, &self.config.stft(), &self.filterbank, LOG_FLOOR)
    }

    /// Normalised condition `[B, n_mels, F]` from log-mel `[n_mels, F]` or `[B, n_mels, F]`.
    pub fn condition(&self, log_mel: &Tensor<R>) -> Result<Tensor<R>> {
        let norm = self.mel_stats.normalize(log_mel)?;
        if norm.ndim() == 2 {
            let s = norm.shape().to_vec();
            norm.reshape(&[1, s[0], s[1]])
        } else {
            Ok(norm)
        }
    }

    /// Output length for `frames` condition frames.
    pub fn output_len(&self, frames: usize) -> usize {
        aligned_len(usize::MAX, frames, self.config.hop_size, self.config.group_size)
    }

    /// Generate audio `[B, T]` from a normalised condition `[B, n_mels, F]`,
    /// with `T = floor(F * hop / g) * g` and latent noise of standard deviation `temperature`.
    pub fn synthesize(&self, cond: &Tensor<R>, temperature: f64, rng: &mut impl Rng) -> Result<Tensor<R>> {
        let frames = cond.shape().get(2).copied().unwrap_or(0);
        self.synthesize_len(cond, self.output_len(frames), temperature, rng)
    }

    /// As [`Model::synthesize`] for an explicit length, a positive multiple of `g`
    /// no longer than the condition covers.
    pub fn synthesize_len(
        &self,
        cond: &Tensor<R>,
        len: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor<R>> {
        let s = cond.shape();
        if s.len() != 3 || s[1] != self.config.n_mels {
            return Err(Error::dim(
                "synthesize",
                format!("condition must be [B, {}, F], got {s:?}", self.config.n_mels),
            ));
        }
        let g = self.config.group_size;
        if len == 0 || len % g != 0 || len > self.output_len(s[2]) {
            return Err(Error::arg(format!(
                "cannot synthesize {len} samples from {} frames with group size {g}",
                s[2]
            )));
        }
        let z = sample_latent(&[s[0], g, len / g], temperature, rng)?;
        self.synthesize_from_latent(&z, cond)
    }

    /// Copy synthesis: extract the condition from `audio` and regenerate it.
    /// The output has `len - len % g` samples.
    pub fn resynthesize(&self, audio: &[f32], temperature: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let mel = self.log_mel(audio)?;
        let cond = self.condition(&mel)?;
        let len = aligned_len(
            audio.len(),
            mel.shape()[1],
            self.config.hop_size,
            self.config.group_size,
        );
        let out = self.synthesize_len(&cond, len, temperature, rng)?;
        Ok(out.data().iter().map(|v| v.as_f32()).collect())
    }

    /// [`signal_mcd`] with this model's analysis settings.
    pub fn mcd(&self, reference: &[f32], test: &[f32]) -> Result<f64> {
        signal_mcd(&self.config, reference, test)
    }

    /// Deterministic synthesis from a given latent `[B, g, N]`.
    pub fn synthesize_from_latent(&self, z: &Tensor<R>, cond: &Tensor<R>) -> Result<Tensor<R>> {
        let inverses = self.flow.inverse_weights(&self.store)?;
        let coarse = {
            let tape = Tape::no_grad();
            let p = self.store.bind(&tape);
            let zv = tape.constant(z.clone());
            let mel = tape.constant(cond.clone());
            self.flow.inverse(&tape, &p, &inverses, &zv, &mel)?.value().clone()
        };
        let out = self.postfilter.apply_chunked(&self.store, &coarse, cond, PF_CHUNK)?;
        if !out.all_finite() {
            return Err(Error::Numeric("synthesized audio contains non-finite samples".into()));
        }
        Ok(out)
    }
}

/// Mel cepstral distortion (dB) between two signals over their common length,
/// using the STFT settings of `cfg` and a 34-band analysis.
pub fn signal_mcd(cfg: &Config, reference: &[f32], test: &[f32]) -> Result<f64> {
    let n = reference.len().min(test.len());
    let fb = Arc::new(MelFilterbank::<f64>::slaney(
        MCD_MELS,
        cfg.fft_size,
        cfg.sample_rate,
        cfg.fmin,
        cfg.fmax,
    )?);
    let to_t = |v: &[f32]| Tensor::new(&[n], v[..n].iter().map(|&x| x as f64).collect());
    mcd(&to_t(reference)?, &to_t(test)?, &cfg.stft(), &fb, MCD_CEPSTRA)
}

/// `[shape]` of independent `N(0, sigma²)` draws; `sigma = 0` gives zeros.
pub fn sample_latent<R: Real>(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Result<Tensor<R>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!("latent standard deviation {sigma} is not valid")));
    }
    if sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::arg(e.to_string()))?;
    Ok(Tensor::from_fn(shape, |_| R::of(normal.sample(rng))))
}
