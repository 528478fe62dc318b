//! 16-bit mono PCM WAV input and output.

use std::path::Path;

use crate::error::{Error, Result};

const SCALE: f32 = 32767.0;

/// Samples in `[-1, 1]` plus the sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::format("wav", other.to_string()),
    }
}

/// `round(x * 32767)` after clamping to `[-1, 1]`.
pub fn to_i16(x: f32) -> i16 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
    (x * SCALE).round() as i16
}

pub fn from_i16(s: i16) -> f32 {
    s as f32 / SCALE
}

impl Audio {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Self {
        Audio { sample_rate, samples }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads mono 16-bit PCM only.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::format(
                "wav",
                format!(
                    "need mono 16-bit PCM, got {} channel(s), {} bits, {:?}",
                    spec.channels, spec.bits_per_sample, spec.sample_format
                ),
            ));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(from_i16))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        Ok(Audio {
            sample_rate: spec.sample_rate,
            samples,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &x in &self.samples {
            w.write_sample(to_i16(x)).map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)
    }
}
