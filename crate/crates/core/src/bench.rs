//! Synthesis throughput measurement.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::LOG_FLOOR;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::real::Real;
use crate::tensor::Tensor;

/// One timed utterance.
#[derive(Clone, Debug)]
pub struct BenchRun {
    pub seconds: f64,
    pub samples: usize,
    /// Median wall time over the repeats, synthesis only.
    pub wall_s: f64,
}

impl BenchRun {
    pub fn throughput(&self) -> f64 {
        self.samples as f64 / self.wall_s
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub label: String,
    pub machine: String,
    pub threads: usize,
    pub sample_rate: u32,
    pub runs: Vec<BenchRun>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl BenchReport {
    /// Median samples per second over the utterances.
    pub fn throughput(&self) -> f64 {
        median(&mut self.runs.iter().map(BenchRun::throughput).collect::<Vec<_>>())
    }

    /// Throughput divided by the sample rate; above 1 is faster than real time.
    pub fn real_time_factor(&self) -> f64 {
        self.throughput() / self.sample_rate as f64
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model: {}", self.label)?;
        writeln!(f, "machine: {} ({} thread(s))", self.machine, self.threads)?;
        for r in &self.runs {
            writeln!(
                f,
                "  {:6.2} s  {:8} samples  {:8.3} s wall  {:9.1} kHz",
                r.seconds,
                r.samples,
                r.wall_s,
                r.throughput() / 1e3
            )?;
        }
        write!(
            f,
            "median throughput: {:.1} kHz, real-time factor {:.3}",
            self.throughput() / 1e3,
            self.real_time_factor()
        )
    }
}

/// Processor description from `/proc/cpuinfo`, or the architecture name.
pub fn machine_description() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

/// Normalised condition for silence: every band at the log floor.
pub fn silence_condition<R: Real>(model: &Model<R>, frames: usize) -> Result<Tensor<R>> {
    let raw = Tensor::full(&[model.config.n_mels, frames], R::of(LOG_FLOOR.ln()));
    model.condition(&raw)
}

/// Time synthesis of `durations` seconds of audio, `repeats` times each after one
/// untimed warm-up. Feature extraction and file I/O are not included.
pub fn bench_synthesis<R: Real>(
    model: &Model<R>,
    label: &str,
    durations: &[f64],
    repeats: usize,
) -> Result<BenchReport> {
    if durations.is_empty() || repeats == 0 {
        return Err(Error::arg("need at least one duration and one repeat"));
    }
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut runs = Vec::with_capacity(durations.len());
    let warm = silence_condition(model, 4 * cfg.group_size)?;
    model.synthesize(&warm, cfg.temperature, &mut rng)?;
    for &secs in durations {
        let frames = ((secs * cfg.sample_rate as f64) / cfg.hop_size as f64).ceil().max(1.0) as usize;
        let cond = silence_condition(model, frames)?;
        let mut times = Vec::with_capacity(repeats);
        let mut samples = 0;
        for _ in 0..repeats {
            let start = Instant::now();
            let out = model.synthesize(&cond, cfg.temperature, &mut rng)?;
            times.push(start.elapsed().as_secs_f64());
            samples = out.numel();
        }
        runs.push(BenchRun {
            seconds: secs,
            samples,
            wall_s: median(&mut times),
        });
    }
    Ok(BenchReport {
        label: label.to_string(),
        machine: machine_description(),
        threads: par::threads(),
        sample_rate: cfg.sample_rate,
        runs,
    })
}
