//! Flat `key = value` configuration covering features, model, loss and training.
//!
//! Parsing is strict: every key must appear exactly once and unknown keys are
//! rejected. `#` starts a comment. [`Config::to_text`] writes the canonical
//! form, which parses back to an identical value.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dsp::{MelFilterbank, MultiResLossConfig, StftConfig};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::postfilter::PostFilterConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,

    pub group_size: usize,
    pub n_flows: usize,
    pub wn_layers: usize,
    pub wn_channels: usize,
    pub wn_kernel_size: usize,
    pub share_invconv: bool,
    /// Prior standard deviation in the likelihood and for training-time sampling.
    pub sigma: f64,
    /// Standard deviation of the noise drawn at synthesis time.
    pub temperature: f64,

    pub pf_layers: usize,
    pub pf_channels: usize,
    pub pf_kernel_size: usize,

    pub loss_resolutions: MultiResLossConfig,

    /// Weight of the likelihood term.
    pub lambda: f64,
    /// The spectral loss is evaluated on steps divisible by `n`.
    pub n: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_period: u64,
    pub total_steps: u64,
    pub segment_length: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: u64,

    pub toy_clips: usize,
    /// Seconds per generated clip.
    pub toy_duration: f64,
}

pub const KEYS: &[&str] = &[
    "sample_rate",
    "fft_size",
    "hop_size",
    "win_size",
    "n_mels",
    "fmin",
    "fmax",
    "group_size",
    "n_flows",
    "wn_layers",
    "wn_channels",
    "wn_kernel_size",
    "share_invconv",
    "sigma",
    "temperature",
    "pf_layers",
    "pf_channels",
    "pf_kernel_size",
    "loss_resolutions",
    "lambda",
    "n",
    "batch_size",
    "lr",
    "lr_halving_period",
    "total_steps",
    "segment_length",
    "seed",
    "grad_clip",
    "checkpoint_every",
    "toy_clips",
    "toy_duration",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

impl Config {
    /// 22.05 kHz, w800 features, 8-sample groups, 4 steps, 7x128 coupling, 7x64 post-filter.
    pub fn g8() -> Self {
        Config {
            sample_rate: 22050,
            fft_size: 2048,
            hop_size: 200,
            win_size: 800,
            n_mels: 80,
            fmin: 0.0,
            fmax: 11025.0,
            group_size: 8,
            n_flows: 4,
            wn_layers: 7,
            wn_channels: 128,
            wn_kernel_size: 3,
            share_invconv: false,
            sigma: 1.0,
            temperature: 0.6,
            pf_layers: 7,
            pf_channels: 64,
            pf_kernel_size: 3,
            loss_resolutions: MultiResLossConfig::five_band(),
            lambda: 1.0,
            n: 3,
            batch_size: 8,
            lr: 4e-4,
            lr_halving_period: 200_000,
            total_steps: 1_000_000,
            segment_length: 16_000,
            seed: 0,
            grad_clip: 10.0,
            checkpoint_every: 10_000,
            toy_clips: 2000,
            toy_duration: 1.0,
        }
    }

    /// As [`Config::g8`] with 20-sample groups and a 100-channel coupling network.
    pub fn g20() -> Self {
        Config {
            group_size: 20,
            wn_channels: 100,
            ..Self::g8()
        }
    }

    /// Desk-scale preset for synthetic tones at 16 kHz: 2000 one-second clips,
    /// 20 000 steps, learning rate halved every 8000 steps, and a model small
    /// enough to train on a CPU.
    pub fn toy() -> Self {
        Config {
            sample_rate: 16000,
            fft_size: 1024,
            hop_size: 200,
            win_size: 800,
            n_mels: 40,
            fmin: 0.0,
            fmax: 8000.0,
            group_size: 8,
            n_flows: 4,
            wn_layers: 4,
            wn_channels: 32,
            wn_kernel_size: 3,
            share_invconv: false,
            sigma: 1.0,
            temperature: 0.6,
            pf_layers: 5,
            pf_channels: 16,
            pf_kernel_size: 3,
            loss_resolutions: MultiResLossConfig::five_band(),
            lambda: 1.0,
            n: 3,
            batch_size: 4,
            lr: 4e-4,
            lr_halving_period: 8000,
            total_steps: 20_000,
            segment_length: 16_000,
            seed: 0,
            grad_clip: 10.0,
            checkpoint_every: 2000,
            toy_clips: 2000,
            toy_duration: 1.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "g8" | "g-8" => Ok(Self::g8()),
            "g20" | "g-20" => Ok(Self::g20()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (g8, g20, toy)"),
            )),
        }
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "sample_rate" => self.sample_rate = parse(key, v)?,
            "fft_size" => self.fft_size = parse(key, v)?,
            "hop_size" => self.hop_size = parse(key, v)?,
            "win_size" => self.win_size = parse(key, v)?,
            "n_mels" => self.n_mels = parse(key, v)?,
            "fmin" => self.fmin = parse(key, v)?,
            "fmax" => self.fmax = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "n_flows" => self.n_flows = parse(key, v)?,
            "wn_layers" => self.wn_layers = parse(key, v)?,
            "wn_channels" => self.wn_channels = parse(key, v)?,
            "wn_kernel_size" => self.wn_kernel_size = parse(key, v)?,
            "share_invconv" => self.share_invconv = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "pf_layers" => self.pf_layers = parse(key, v)?,
            "pf_channels" => self.pf_channels = parse(key, v)?,
            "pf_kernel_size" => self.pf_kernel_size = parse(key, v)?,
            "loss_resolutions" => {
                self.loss_resolutions = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?
            }
            "lambda" => self.lambda = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_halving_period" => self.lr_halving_period = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "segment_length" => self.segment_length = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "toy_clips" => self.toy_clips = parse(key, v)?,
            "toy_duration" => self.toy_duration = parse(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "sample_rate" => self.sample_rate.to_string(),
            "fft_size" => self.fft_size.to_string(),
            "hop_size" => self.hop_size.to_string(),
            "win_size" => self.win_size.to_string(),
            "n_mels" => self.n_mels.to_string(),
            "fmin" => self.fmin.to_string(),
            "fmax" => self.fmax.to_string(),
            "group_size" => self.group_size.to_string(),
            "n_flows" => self.n_flows.to_string(),
            "wn_layers" => self.wn_layers.to_string(),
            "wn_channels" => self.wn_channels.to_string(),
            "wn_kernel_size" => self.wn_kernel_size.to_string(),
            "share_invconv" => self.share_invconv.to_string(),
            "sigma" => self.sigma.to_string(),
            "temperature" => self.temperature.to_string(),
            "pf_layers" => self.pf_layers.to_string(),
            "pf_channels" => self.pf_channels.to_string(),
            "pf_kernel_size" => self.pf_kernel_size.to_string(),
            "loss_resolutions" => self.loss_resolutions.to_string(),
            "lambda" => self.lambda.to_string(),
            "n" => self.n.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_halving_period" => self.lr_halving_period.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "segment_length" => self.segment_length.to_string(),
            "seed" => self.seed.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "toy_clips" => self.toy_clips.to_string(),
            "toy_duration" => self.toy_duration.to_string(),
            _ => unreachable!("key list and accessor out of sync"),
        }
    }

    /// Canonical text: every key in [`KEYS`] order, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Strict parse of a complete configuration, then validation.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::g8();
        let mut seen = vec![false; KEYS.len()];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected key = value, got `{line}`"),
                )
            })?;
            let key = key.trim();
            let idx = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::config(key, "unknown key"))?;
            if seen[idx] {
                return Err(Error::config(key, "given more than once"));
            }
            seen[idx] = true;
            cfg.set(key, value)?;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::config(KEYS[i], "missing"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            fft_size: self.fft_size,
            hop_size: self.hop_size,
            win_size: self.win_size,
            window: crate::dsp::Window::Hann,
        }
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            group_size: self.group_size,
            n_flows: self.n_flows,
            wn_layers: self.wn_layers,
            wn_channels: self.wn_channels,
            kernel_size: self.wn_kernel_size,
            n_mels: self.n_mels,
            hop_size: self.hop_size,
            sigma: self.sigma,
            share_invconv: self.share_invconv,
        }
    }

    pub fn postfilter(&self) -> PostFilterConfig {
        PostFilterConfig {
            n_layers: self.pf_layers,
            channels: self.pf_channels,
            kernel_size: self.pf_kernel_size,
            n_mels: self.n_mels,
            hop_size: self.hop_size,
        }
    }

    /// Samples per toy clip.
    pub fn toy_len(&self) -> usize {
        (self.toy_duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &'static str| move |e: Error| Error::config(key, e.to_string());
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate", "must be positive"));
        }
        self.stft().validate().map_err(wrap("fft_size"))?;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::config("fmax", "need 0 <= fmin < fmax <= sample_rate / 2"));
        }
        MelFilterbank::<f32>::slaney(self.n_mels, self.fft_size, self.sample_rate, self.fmin, self.fmax)
            .map_err(wrap("n_mels"))?;
        self.flow().validate()?;
        self.postfilter().validate()?;
        self.loss_resolutions.validate().map_err(wrap("loss_resolutions"))?;
        for r in &self.loss_resolutions.resolutions {
            MelFilterbank::<f32>::slaney(r.n_mels, r.stft.fft_size, self.sample_rate, self.fmin, self.fmax)
                .map_err(wrap("loss_resolutions"))?;
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::config("temperature", "must be non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if self.lambda == 0.0 && self.n != 1 {
            return Err(Error::config(
                "n",
                "lambda = 0 leaves steps between spectral-loss evaluations without any loss; use n = 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::config("lr_halving_period", "must be positive"));
        }
        let unit = self.group_size * self.hop_size;
        if self.segment_length == 0 || self.segment_length % unit != 0 {
            return Err(Error::config(
                "segment_length",
                format!("must be a positive multiple of group_size * hop_size = {unit}"),
            ));
        }
        if self.segment_length < self.loss_resolutions.min_len() {
            return Err(Error::config(
                "segment_length",
                "shorter than the largest loss FFT needs",
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be non-negative (0 disables)"));
        }
        if !(self.toy_duration > 0.0) {
            return Err(Error::config("toy_duration", "must be positive"));
        }
        Ok(())
    }
}
