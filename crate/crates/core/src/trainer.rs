//! Joint training of the flow and the post-filter.
//!
//! Every step evaluates the likelihood of the batch under the flow. On steps
//! divisible by `n` the flow also runs backwards from sampled noise, the
//! post-filter refines the result, and the multi-resolution spectral loss
//! against the batch audio joins the objective. One backward pass and one Adam
//! update follow.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Dataset};
use crate::dsp::{loss_multires, MultiResLoss};
use crate::error::{Error, Result};
use crate::flow::nll_loss;
use crate::model::{sample_latent, Model};
use crate::real::Real;
use crate::tensor::{AdamState, Tape};

pub const CSV_HEADER: &str = "step,lr,l_z,l_s,l_total,wall_ms";

/// Losses and timing for one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub l_z: f64,
    /// Present only on steps that evaluated the spectral loss.
    pub l_s: Option<f64>,
    pub l_total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.step,
            self.lr,
            self.l_z,
            self.l_s.map(|v| v.to_string()).unwrap_or_default(),
            self.l_total,
            self.wall_ms
        )
    }
}

/// `lr0 * 0.5^floor(step / period)`.
pub fn lr_at(lr0: f64, period: u64, step: u64) -> f64 {
    lr0 * 0.5f64.powi((step / period).min(i32::MAX as u64) as i32)
}

/// Generator for everything random in step `step`: batch selection and latent noise.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    rng.set_stream(step);
    rng
}

pub struct Trainer<R: Real> {
    pub model: Model<R>,
    pub adam: AdamState<R>,
    /// Index of the next step to run.
    pub step: u64,
    loss: MultiResLoss<R>,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: Model<R>) -> Result<Self> {
        let adam = AdamState::new(&model.store);
        Self::with_state(model, adam, 0)
    }

    pub fn with_state(model: Model<R>, adam: AdamState<R>, step: u64) -> Result<Self> {
        let c = &model.config;
        let loss = MultiResLoss::new(c.loss_resolutions.clone(), c.sample_rate, c.fmin, c.fmax)?;
        Ok(Trainer {
            model,
            adam,
            step,
            loss,
        })
    }

    pub fn loss(&self) -> &MultiResLoss<R> {
        &self.loss
    }

    pub fn is_spectral_step(&self, step: u64) -> bool {
        step % self.model.config.n as u64 == 0
    }

    /// Draw this step's batch from `data` and train on it.
    pub fn train_step(&mut self, data: &Dataset<R>) -> Result<StepRecord> {
        let start = Instant::now();
        let mut rng = step_rng(self.model.config.seed, self.step);
        let batch = data.batch(&self.model.config, &self.model.mel_stats, &mut rng)?;
        let mut rec = self.step_on_batch(&batch, &mut rng)?;
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(rec)
    }

    /// One update on a prepared batch; `rng` supplies the latent noise.
    pub fn step_on_batch(&mut self, batch: &Batch<R>, rng: &mut ChaCha8Rng) -> Result<StepRecord> {
        let start = Instant::now();
        let step = self.step;
        let cfg = self.model.config.clone();
        let lr = lr_at(cfg.lr, cfg.lr_halving_period, step);
        let spectral = self.is_spectral_step(step);

        let tape = Tape::new();
        let p = self.model.store.bind(&tape);
        let audio = tape.constant(batch.audio.clone());
        let cond = tape.constant(batch.cond.clone());

        let stats = self.model.flow.forward(&tape, &p, &audio, &cond)?;
        let l_z = nll_loss(&tape, &stats, cfg.sigma)?;
        let mut total = if cfg.lambda > 0.0 {
            Some(tape.scale(&l_z, R::of(cfg.lambda))?)
        } else {
            None
        };

        let mut l_s_value = None;
        if spectral {
            let s = batch.audio.shape();
            let g = cfg.group_size;
            let z = tape.constant(sample_latent(&[s[0], g, s[1] / g], cfg.sigma, rng)?);
            let inverses = self.model.flow.inverse_weights(&self.model.store)?;
            let coarse = self.model.flow.inverse(&tape, &p, &inverses, &z, &cond)?;
            let refined = self.model.postfilter.apply(&tape, &p, &coarse, &cond)?;
            let l_s = loss_multires(&tape, &audio, &refined, &self.loss)?;
            l_s_value = Some(l_s.item()?.as_f64());
            total = Some(match total {
                Some(t) => tape.add(&t, &l_s)?,
                None => l_s,
            });
        }
        let total = total.ok_or_else(|| {
            Error::config(
                "n",
                format!("step {step} has no loss term (lambda = 0 and no spectral loss)"),
            )
        })?;

        let l_z_value = l_z.item()?.as_f64();
        let total_value = total.item()?.as_f64();
        let describe = || {
            format!(
                "step {step}: L_z = {l_z_value}, L_s = {}, L_total = {total_value}",
                l_s_value.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
            )
        };
        if !total_value.is_finite() || !l_z_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at {}", describe())));
        }

        let mut grads = tape.backward(&total)?;
        drop(stats);
        let store = &mut self.model.store;
        store.clear_grads();
        store.accumulate(&mut grads, &p);
        drop(grads);
        drop(p);
        let norm = if cfg.grad_clip > 0.0 {
            store.clip_grad_norm(cfg.grad_clip)
        } else {
            store.grad_norm()
        };
        if !norm.is_finite() {
            store.clear_grads();
            return Err(Error::Numeric(format!("non-finite gradient norm at {}", describe())));
        }
        self.adam.step(store, lr)?;
        self.model
            .flow
            .check_invertible(&self.model.store)
            .map_err(|e| Error::Numeric(format!("after step {step}: {e}")))?;
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            l_z: l_z_value,
            l_s: l_s_value,
            l_total: total_value,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Run until `self.step == until`, writing one CSV row per step to `log`
    /// (header first when starting from step 0) and calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &Dataset<R>,
        until: u64,
        mut log: Option<&mut dyn Write>,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        data.check(&self.model.config)?;
        if self.step == 0 {
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{CSV_HEADER}")?;
            }
        }
        let mut records = Vec::new();
        while self.step < until {
            let rec = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.csv_line())?;
                w.flush()?;
            }
            on_step(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}
