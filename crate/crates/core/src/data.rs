//! Training data: synthetic tone clips, paired audio/mel directories and batch sampling.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::dsp::MelFile;
use crate::error::{Error, Result};
use crate::model::{MelStats, Model};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::wav::{from_i16, to_i16, Audio};

/// Stream offset separating held-out toy clips from training clips.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;

/// One generated clip and the tone frequencies it contains.
#[derive(Clone, Debug)]
pub struct ToyClip {
    pub samples: Vec<f32>,
    pub freqs: Vec<f64>,
}

/// Sum of one to three sinusoids under a slow amplitude envelope, plus a low
/// noise floor, quantised to 16 bits. Deterministic in `(seed, index)`.
pub fn toy_clip(sample_rate: u32, len: usize, seed: u64, index: u64) -> ToyClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let sr = sample_rate as f64;
    let n_tones = rng.gen_range(1..=3);
    let f_hi = (0.25 * sr).min(4000.0);
    let tones: Vec<(f64, f64, f64)> = (0..n_tones)
        .map(|_| {
            let f = rng.gen_range(100.0..f_hi);
            let a = rng.gen_range(0.1..0.3);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (f, a, phase)
        })
        .collect();
    let env_rate = rng.gen_range(0.5..3.0);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.003).expect("valid noise level");
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
            let tone: f64 = tones
                .iter()
                .map(|(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            let x = env * tone + noise.sample(&mut rng);
            from_i16(to_i16(x as f32))
        })
        .collect();
    ToyClip {
        samples,
        freqs: tones.iter().map(|t| t.0).collect(),
    }
}

/// Audio with its (unnormalised) log-mel spectrogram `[n_mels, F]`.
#[derive(Clone, Debug)]
pub struct Clip<R> {
    pub audio: Vec<f32>,
    pub mel: Tensor<R>,
}

/// A training batch: audio `[B, S]` and normalised condition `[B, n_mels, S / hop]`.
#[derive(Clone, Debug)]
pub struct Batch<R> {
    pub audio: Tensor<R>,
    pub cond: Tensor<R>,
}

#[derive(Clone, Debug)]
pub struct Dataset<R> {
    pub clips: Vec<Clip<R>>,
}

impl<R: Real> Dataset<R> {
    /// Generate `count` toy clips starting at stream `first` in memory.
    pub fn toy(model: &Model<R>, count: usize, first: u64) -> Result<Self> {
        let cfg = &model.config;
        let clips = (0..count as u64)
            .map(|i| {
                let audio = toy_clip(cfg.sample_rate, cfg.toy_len(), cfg.seed, first + i).samples;
                let mel = model.log_mel(&audio)?;
                Ok(Clip { audio, mel })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { clips })
    }

    /// Load every `*.wav` in `dir` (sorted by name). A sibling `.mel` file is used
    /// as the condition when present; otherwise it is computed.
    pub fn load_dir(model: &Model<R>, dir: &Path) -> Result<Self> {
        let cfg = &model.config;
        let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        wavs.sort();
        if wavs.is_empty() {
            return Err(Error::format("dataset", format!("no .wav files in {}", dir.display())));
        }
        let clips = wavs
            .iter()
            .map(|path| {
                let audio = Audio::read(path)?;
                if audio.sample_rate != cfg.sample_rate {
                    return Err(Error::format(
                        "dataset",
                        format!(
                            "{}: sample rate {} differs from configured {}",
                            path.display(),
                            audio.sample_rate,
                            cfg.sample_rate
                        ),
                    ));
                }
                let mel_path = path.with_extension("mel");
                let mel = if mel_path.exists() {
                    let f = MelFile::load(&mel_path)?;
                    if f.n_mels as usize != cfg.n_mels || f.hop_size as usize != cfg.hop_size {
                        return Err(Error::format(
                            "dataset",
                            format!("{}: mel layout does not match the configuration", mel_path.display()),
                        ));
                    }
                    let c = f.condition::<R>();
                    let s = c.shape().to_vec();
                    c.reshape(&[s[1], s[2]])?
                } else {
                    model.log_mel(&audio.samples)?
                };
                Ok(Clip {
                    audio: audio.samples,
                    mel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn mel_stats(&self) -> Result<MelStats> {
        let mels: Vec<Tensor<R>> = self.clips.iter().map(|c| c.mel.clone()).collect();
        MelStats::estimate(&mels)
    }

    /// Check every clip can supply a full training segment.
    pub fn check(&self, cfg: &Config) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::format("dataset", "empty"));
        }
        for (i, c) in self.clips.iter().enumerate() {
            if c.audio.len() < cfg.segment_length {
                return Err(Error::format(
                    "dataset",
                    format!(
                        "clip {i} has {} samples, segment needs {}",
                        c.audio.len(),
                        cfg.segment_length
                    ),
                ));
            }
            if c.mel.ndim() != 2 || c.mel.shape()[0] != cfg.n_mels {
                return Err(Error::format(
                    "dataset",
                    format!("clip {i} mel shape {:?}", c.mel.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Random hop-aligned crops of `segment_length` samples from random clips.
    pub fn batch(&self, cfg: &Config, stats: &MelStats, rng: &mut impl Rng) -> Result<Batch<R>> {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..self.clips.len());
                let c = &self.clips[i];
                let spare = c.audio.len().saturating_sub(cfg.segment_length) / cfg.hop_size;
                let frames_avail = c.mel.shape()[1].saturating_sub(cfg.segment_length / cfg.hop_size);
                (i, rng.gen_range(0..=spare.min(frames_avail)))
            })
            .collect();
        self.batch_from(cfg, stats, &picks)
    }

    /// Batch from explicit `(clip, start frame)` picks.
    pub fn batch_from(&self, cfg: &Config, stats: &MelStats, picks: &[(usize, usize)]) -> Result<Batch<R>> {
        let (s, hop, m) = (cfg.segment_length, cfg.hop_size, cfg.n_mels);
        let frames = s / hop;
        let mut audio = Vec::with_capacity(picks.len() * s);
        let mut mel = Vec::with_capacity(picks.len() * m * frames);
        for &(i, j) in picks {
            let c = self.clips.get(i).ok_or_else(|| Error::arg(format!("no clip {i}")))?;
            let off = j * hop;
            let f = c.mel.shape()[1];
            if off + s > c.audio.len() || j + frames > f {
                return Err(Error::arg(format!("crop at frame {j} exceeds clip {i}")));
            }
            audio.extend(c.audio[off..off + s].iter().map(|&v| R::of(v as f64)));
            for b in 0..m {
                mel.extend_from_slice(&c.mel.data()[b * f + j..b * f + j + frames]);
            }
        }
        let b = picks.len();
        Ok(Batch {
            audio: Tensor::new(&[b, s], audio)?,
            cond: stats.normalize(&Tensor::new(&[b, m, frames], mel)?)?,
        })
    }
}

/// Write `count` toy clips as `toy_XXXXX.wav` with matching `.mel` conditions.
pub fn write_toy_dataset<R: Real>(model: &Model<R>, dir: &Path, count: usize, first: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let cfg = &model.config;
    let mut out = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let clip = toy_clip(cfg.sample_rate, cfg.toy_len(), cfg.seed, first + i);
        let path = dir.join(format!("toy_{:05}.wav", first + i));
        Audio::new(cfg.sample_rate, clip.samples.clone()).write(&path)?;
        let mel = model.log_mel(&clip.samples)?;
        MelFile::from_condition(&mel, cfg.sample_rate, cfg.hop_size as u32)?.save(path.with_extension("mel"))?;
        out.push(path);
    }
    Ok(out)
}
