//! Compressed normalizing flow over grouped audio.
//!
//! Audio `[B, T]` is folded into `g` channels (`[B, g, T/g]`) and pushed
//! through `K` steps. Step `k` mixes channels with its own invertible `g x g`
//! matrix `W_k` and then applies an affine coupling whose network is the same
//! parameter set for every step. The mel condition is duplicated to the sample
//! rate, smoothed, and folded the same way as the audio, giving `n_mels * g`
//! condition channels at the grouped rate; its per-layer projections are
//! computed once per pass and reused by all `K` couplings.

use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, GatedStack, Upsampler};
use crate::real::Real;
use crate::tensor::linalg::{random_orthogonal, Lu, MIN_ABS_DET};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Samples per group `g`; must be even.
    pub group_size: usize,
    pub n_flows: usize,
    pub wn_layers: usize,
    pub wn_channels: usize,
    pub kernel_size: usize,
    pub n_mels: usize,
    pub hop_size: usize,
    /// Standard deviation of the Gaussian prior used in the likelihood.
    pub sigma: f64,
    /// Use one channel-mixing matrix for every step (ablation switch).
    pub share_invconv: bool,
}

impl FlowConfig {
    /// Four steps over groups of 8, coupling network of 7 layers x 128 channels.
    pub fn g8() -> Self {
        FlowConfig {
            group_size: 8,
            n_flows: 4,
            wn_layers: 7,
            wn_channels: 128,
            kernel_size: 3,
            n_mels: 80,
            hop_size: 200,
            sigma: 1.0,
            share_invconv: false,
        }
    }

    /// Groups of 20 with a 100-channel coupling network.
    pub fn g20() -> Self {
        FlowConfig {
            group_size: 20,
            wn_channels: 100,
            ..Self::g8()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| Err(Error::config(key, detail));
        if self.group_size < 2 || self.group_size % 2 != 0 {
            return bad("group_size", "must be even and at least 2");
        }
        if self.n_flows == 0 {
            return bad("n_flows", "must be at least 1");
        }
        if self.wn_layers == 0 || self.wn_channels == 0 {
            return bad("wn_layers", "coupling network needs layers and channels");
        }
        if self.kernel_size % 2 == 0 {
            return bad("wn_kernel_size", "must be odd");
        }
        if self.n_mels == 0 {
            return bad("n_mels", "must be positive");
        }
        if self.hop_size == 0 {
            return bad("hop_size", "must be positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma", "must be positive");
        }
        Ok(())
    }
}

/// Result of the forward (audio to noise) direction.
pub struct LatentStats<R> {
    /// `[B, g, N]`
    pub z: Var<R>,
    /// Per-item sum of every coupling log-scale, `[B]`.
    pub sum_log_s: Var<R>,
    /// Per-item `N * Σ_k log|det W_k|` (a scalar, equal for all items).
    pub sum_logdet_w: Var<R>,
}

/// Fold `[B, T]` audio into `[B, g, T/g]`, dropping the `T mod g` trailing samples.
pub fn group<R: Real>(tape: &Tape<R>, audio: &Var<R>, g: usize) -> Result<Var<R>> {
    let s = audio.shape();
    if s.len() != 2 {
        return Err(Error::dim("group", format!("expected [B, T], got {s:?}")));
    }
    if g == 0 || s[1] < g {
        return Err(Error::arg(format!("{} samples cannot fill a group of {g}", s[1])));
    }
    let t = s[1] - s[1] % g;
    let a = if t == s[1] {
        audio.clone()
    } else {
        tape.narrow(audio, 1, 0, t)?
    };
    let a = tape.reshape(&a, &[s[0], 1, t])?;
    tape.group(&a, g)
}

/// Inverse of [`group`]: `[B, g, N] -> [B, g * N]`.
pub fn ungroup<R: Real>(tape: &Tape<R>, grouped: &Var<R>) -> Result<Var<R>> {
    let s = grouped.shape();
    if s.len() != 3 {
        return Err(Error::dim("ungroup", format!("expected [B, g, N], got {s:?}")));
    }
    let flat = tape.ungroup(grouped, s[1])?;
    tape.reshape(&flat, &[s[0], s[1] * s[2]])
}

type InverseCache<R> = Mutex<Option<((u64, u64), Vec<Arc<Tensor<R>>>)>>;

pub struct Flow<R: Real> {
    pub cfg: FlowConfig,
    upsampler: Upsampler,
    convs: Vec<ParamId>,
    wn: GatedStack,
    end: Conv,
    inverse_cache: InverseCache<R>,
}

impl<R: Real> Flow<R> {
    /// Register all flow parameters in `store`.
    pub fn new(cfg: FlowConfig, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.group_size;
        let upsampler = Upsampler::new(store, "flow.upsampler", cfg.n_mels, cfg.hop_size, 3);
        let n_mats = if cfg.share_invconv { 1 } else { cfg.n_flows };
        let convs = (0..n_mats)
            .map(|k| store.add(format!("flow.conv{k}.weight"), random_orthogonal(g, rng)))
            .collect();
        let wn = GatedStack::new(
            store,
            "flow.coupling",
            g / 2,
            cfg.wn_channels,
            cfg.wn_layers,
            cfg.kernel_size,
            cfg.n_mels * g,
            rng,
        );
        let end = Conv::zeros(store, "flow.coupling.end", g, cfg.wn_channels, 1);
        Ok(Flow {
            cfg,
            upsampler,
            convs,
            wn,
            end,
            inverse_cache: Mutex::new(None),
        })
    }

    /// Channel-mixing matrix used by step `k`.
    pub fn conv_id(&self, k: usize) -> ParamId {
        self.convs[if self.cfg.share_invconv { 0 } else { k }]
    }

    pub fn conv_ids(&self) -> &[ParamId] {
        &self.convs
    }

    /// Coupling output layer (log-scale and shift), zero at initialisation.
    pub fn end_conv(&self) -> Conv {
        self.end
    }

    /// Condition `[B, n_mels, F]` -> per-layer coupling terms at the grouped rate for `len` samples.
    pub fn condition(&self, tape: &Tape<R>, p: &Bound<R>, mel: &Var<R>, len: usize) -> Result<Vec<Var<R>>> {
        let g = self.cfg.group_size;
        if mel.shape().len() != 3 || mel.shape()[1] != self.cfg.n_mels {
            return Err(Error::dim(
                "flow condition",
                format!("expected [B, {}, F], got {:?}", self.cfg.n_mels, mel.shape()),
            ));
        }
        if len % g != 0 {
            return Err(Error::arg(format!(
                "length {len} is not a multiple of the group size {g}"
            )));
        }
        let up = self.upsampler.apply(tape, p, mel, len)?;
        let folded = tape.group(&up, g)?;
        self.wn.condition(tape, p, &folded)
    }

    fn log_s_and_t(&self, tape: &Tape<R>, p: &Bound<R>, ha: &Var<R>, cond: &[Var<R>]) -> Result<(Var<R>, Var<R>)> {
        let half = self.cfg.group_size / 2;
        let out = self.end.apply(tape, p, &self.wn.apply(tape, p, ha, cond)?)?;
        Ok((tape.narrow(&out, 1, 0, half)?, tape.narrow(&out, 1, half, half)?))
    }

    /// Affine coupling: returns the transformed `[B, g, N]` and the per-item sum of log-scales.
    pub fn coupling_forward(
        &self,
        tape: &Tape<R>,
        p: &Bound<R>,
        h: &Var<R>,
        cond: &[Var<R>],
    ) -> Result<(Var<R>, Var<R>)> {
        let half = self.cfg.group_size / 2;
        self.check_grouped(h)?;
        let ha = tape.narrow(h, 1, 0, half)?;
        let hb = tape.narrow(h, 1, half, half)?;
        let (log_s, t) = self.log_s_and_t(tape, p, &ha, cond)?;
        let yb = tape.add(&tape.mul(&hb, &tape.exp(&log_s)?)?, &t)?;
        Ok((tape.concat(&[&ha, &yb], 1)?, tape.sum_per_item(&log_s)?))
    }

    /// Exact inverse of [`Flow::coupling_forward`].
    pub fn coupling_inverse(&self, tape: &Tape<R>, p: &Bound<R>, y: &Var<R>, cond: &[Var<R>]) -> Result<Var<R>> {
        let half = self.cfg.group_size / 2;
        self.check_grouped(y)?;
        let ya = tape.narrow(y, 1, 0, half)?;
        let yb = tape.narrow(y, 1, half, half)?;
        let (log_s, t) = self.log_s_and_t(tape, p, &ya, cond)?;
        let hb = tape.mul(&tape.sub(&yb, &t)?, &tape.exp(&tape.neg(&log_s)?)?)?;
        tape.concat(&[&ya, &hb], 1)
    }

    fn check_grouped(&self, h: &Var<R>) -> Result<()> {
        let s = h.shape();
        if s.len() != 3 || s[1] != self.cfg.group_size {
            return Err(Error::dim(
                "coupling",
                format!("expected [B, {}, N], got {s:?}", self.cfg.group_size),
            ));
        }
        Ok(())
    }

    /// Audio `[B, T]` (T a multiple of g) and mel `[B, n_mels, F]` to latent statistics.
    pub fn forward(&self, tape: &Tape<R>, p: &Bound<R>, audio: &Var<R>, mel: &Var<R>) -> Result<LatentStats<R>> {
        let g = self.cfg.group_size;
        let s = audio.shape();
        if s.len() != 2 || s[1] % g != 0 || s[1] == 0 {
            return Err(Error::arg(format!(
                "audio {s:?} must be [B, T] with T a positive multiple of {g}"
            )));
        }
        if mel.shape()[0] != s[0] {
            return Err(Error::dim("flow", "audio and condition batch sizes differ"));
        }
        let n = s[1] / g;
        let cond = self.condition(tape, p, mel, s[1])?;
        let mut h = group(tape, audio, g)?;
        let mut log_s_total: Option<Var<R>> = None;
        let mut logdet_total: Option<Var<R>> = None;
        for k in 0..self.cfg.n_flows {
            let w = &p[self.conv_id(k)];
            h = tape.channel_mix(&h, w)?;
            let ld = tape.log_abs_det(w)?;
            logdet_total = Some(match logdet_total {
                None => ld,
                Some(acc) => tape.add(&acc, &ld)?,
            });
            let (out, ls) = self.coupling_forward(tape, p, &h, &cond)?;
            h = out;
            log_s_total = Some(match log_s_total {
                None => ls,
                Some(acc) => tape.add(&acc, &ls)?,
            });
        }
        Ok(LatentStats {
            z: h,
            sum_log_s: log_s_total.expect("n_flows >= 1"),
            sum_logdet_w: tape.scale(&logdet_total.expect("n_flows >= 1"), R::of(n as f64))?,
        })
    }

    /// Inverses of every channel-mixing matrix, reused until the parameters change.
    pub fn inverse_weights(&self, store: &ParamStore<R>) -> Result<Vec<Arc<Tensor<R>>>> {
        let mut cache = self.inverse_cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((stamp, inv)) = cache.as_ref() {
            if *stamp == store.stamp() {
                return Ok(inv.clone());
            }
        }
        let inv = self
            .convs
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let lu = Lu::new(store.get(id)).map_err(|e| Error::Numeric(format!("flow {k}: {e}")))?;
                if lu.det().abs().as_f64() <= MIN_ABS_DET {
                    return Err(Error::Numeric(format!("flow {k}: channel-mixing matrix is singular")));
                }
                Ok(Arc::new(lu.inverse()))
            })
            .collect::<Result<Vec<_>>>()?;
        *cache = Some((store.stamp(), inv.clone()));
        Ok(inv)
    }

    /// Error naming the first step whose matrix has `|det| <= 1e-12`.
    pub fn check_invertible(&self, store: &ParamStore<R>) -> Result<()> {
        for (k, &id) in self.convs.iter().enumerate() {
            let det = Lu::new(store.get(id)).map(|lu| lu.det().abs().as_f64()).unwrap_or(0.0);
            if !(det > MIN_ABS_DET) {
                return Err(Error::Numeric(format!(
                    "flow {k}: channel-mixing matrix is singular (|det| = {det:e})"
                )));
            }
        }
        Ok(())
    }

    /// Noise `[B, g, N]` back to audio `[B, g * N]`, steps in reverse order.
    pub fn inverse(
        &self,
        tape: &Tape<R>,
        p: &Bound<R>,
        inverses: &[Arc<Tensor<R>>],
        z: &Var<R>,
        mel: &Var<R>,
    ) -> Result<Var<R>> {
        self.check_grouped(z)?;
        if inverses.len() != self.convs.len() {
            return Err(Error::arg("one inverse per channel-mixing matrix required"));
        }
        let len = z.shape()[2] * self.cfg.group_size;
        let cond = self.condition(tape, p, mel, len)?;
        let mut h = z.clone();
        for k in (0..self.cfg.n_flows).rev() {
            h = self.coupling_inverse(tape, p, &h, &cond)?;
            let slot = if self.cfg.share_invconv { 0 } else { k };
            let w_inv = tape.matrix_inverse_with(&p[self.convs[slot]], Arc::clone(&inverses[slot]))?;
            h = tape.channel_mix(&h, &w_inv)?;
        }
        ungroup(tape, &h)
    }

    /// Scalar parameters in the coupling network (independent of the number of steps).
    pub fn coupling_census(store: &ParamStore<R>) -> usize {
        store.census_prefix("flow.coupling.")
    }
}

/// `[Σ z²/(2σ²) − Σ log s − Σ log|det W|] / D` per item, averaged over the batch,
/// with `D = g * N` the number of latent elements per item.
pub fn nll_loss<R: Real>(tape: &Tape<R>, stats: &LatentStats<R>, sigma: f64) -> Result<Var<R>> {
    if !(sigma > 0.0) {
        return Err(Error::arg("sigma must be positive"));
    }
    let s = stats.z.shape();
    let d = (s[1] * s[2]) as f64;
    let zsq = tape.scale(
        &tape.sum_per_item(&tape.square(&stats.z)?)?,
        R::of(1.0 / (2.0 * sigma * sigma)),
    )?;
    let per_item = tape.sub(&tape.sub(&zsq, &stats.sum_log_s)?, &stats.sum_logdet_w)?;
    tape.scale(&tape.mean(&per_item)?, R::of(1.0 / d))
}

/// Number of samples usable for `len` audio samples with `frames` condition frames:
/// the largest multiple of `g` that the frames cover and the audio provides.
pub fn aligned_len(len: usize, frames: usize, hop: usize, g: usize) -> usize {
    let t = len.min(frames * hop);
    t - t % g
}
