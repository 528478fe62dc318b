//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "WGCKPT\0\0" | u32 version
//! u32 len | config text | [u8; 32] SHA-256 of the config text
//! u64 step
//! u32 n_params | per param: u32 len | name | u32 ndim | u32 dims.. | f32 values..
//! f64 beta1 | f64 beta2 | f64 eps | u64 adam steps | per param: f32 m.. | f32 v..
//! u32 n_mels | f32 mean.. | f32 std..
//! ```
//!
//! Values are always stored as `f32`, so a save/load/save cycle is byte-identical.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{MelStats, Model};
use crate::real::Real;
use crate::tensor::{AdamState, Tensor};
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"WGCKPT\0\0";
pub const VERSION: u32 = 1;

/// SHA-256 of the canonical configuration text.
pub fn fingerprint(cfg: &Config) -> [u8; 32] {
    Sha256::digest(cfg.to_text().as_bytes()).into()
}

pub fn fingerprint_hex(cfg: &Config) -> String {
    fingerprint(cfg).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s<R: Real>(out: &mut Vec<u8>, t: &Tensor<R>) {
    for v in t.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
}

pub fn to_bytes<R: Real>(t: &Trainer<R>) -> Vec<u8> {
    let model = &t.model;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model.config.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&fingerprint(&model.config));
    out.extend_from_slice(&t.step.to_le_bytes());
    put_u32(&mut out, model.store.len());
    for p in model.store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value().ndim());
        for &d in p.value().shape() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, p.value());
    }
    for v in [t.adam.beta1, t.adam.beta2, t.adam.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&t.adam.steps_taken().to_le_bytes());
    for m in t.adam.first_moments() {
        put_f32s(&mut out, m);
    }
    for v in t.adam.second_moments() {
        put_f32s(&mut out, v);
    }
    put_u32(&mut out, model.mel_stats.n_mels());
    for v in model.mel_stats.mean.iter().chain(&model.mel_stats.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated while reading {field} at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format("checkpoint", "size overflow"))?,
            field,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn tensor<R: Real>(&mut self, shape: &[usize], field: &str) -> Result<Tensor<R>> {
        let n = shape.iter().product();
        Tensor::new(
            shape,
            self.f32s(n, field)?.into_iter().map(|v| R::of(v as f64)).collect(),
        )
    }
}

pub fn from_bytes<R: Real>(buf: &[u8]) -> Result<Trainer<R>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = c.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let len = c.u32("config length")?;
    let text = std::str::from_utf8(c.take(len, "config")?)
        .map_err(|_| Error::format("checkpoint", "config text is not UTF-8"))?;
    let digest = c.take(32, "config fingerprint")?;
    if Sha256::digest(text.as_bytes()).as_slice() != digest {
        return Err(Error::format("checkpoint", "config fingerprint mismatch"));
    }
    let config = Config::from_text(text)?;
    let step = c.u64("step")?;
    let mut model = Model::<R>::new(config)?;
    let n_params = c.u32("parameter count")?;
    if n_params != model.store.len() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "{n_params} parameters stored, configuration defines {}",
                model.store.len()
            ),
        ));
    }
    let ids: Vec<_> = model.store.iter().map(|p| p.name.clone()).collect();
    let mut shapes = Vec::with_capacity(n_params);
    for expected in &ids {
        let nl = c.u32("parameter name length")?;
        let name = std::str::from_utf8(c.take(nl, "parameter name")?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
        if name != expected {
            return Err(Error::format(
                "checkpoint",
                format!("expected parameter {expected}, found {name}"),
            ));
        }
        let ndim = c.u32("parameter rank")?;
        let shape = (0..ndim)
            .map(|_| c.u32("parameter shape"))
            .collect::<Result<Vec<_>>>()?;
        let value = c.tensor::<R>(&shape, name)?;
        model
            .store
            .set_by_name(name, value)
            .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        shapes.push(shape);
    }
    let hyper = (c.f64("beta1")?, c.f64("beta2")?, c.f64("eps")?);
    let adam_steps = c.u64("optimizer step")?;
    let m = shapes
        .iter()
        .map(|s| c.tensor::<R>(s, "first moments"))
        .collect::<Result<Vec<_>>>()?;
    let v = shapes
        .iter()
        .map(|s| c.tensor::<R>(s, "second moments"))
        .collect::<Result<Vec<_>>>()?;
    let adam = AdamState::restore(&model.store, hyper, adam_steps, m, v)?;
    let n_mels = c.u32("mel statistics size")?;
    if n_mels != model.config.n_mels {
        return Err(Error::format("checkpoint", "mel statistics do not match n_mels"));
    }
    let mean = c.f32s(n_mels, "mel mean")?;
    let std = c.f32s(n_mels, "mel std")?;
    model.mel_stats = MelStats { mean, std };
    if c.pos != buf.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes", buf.len() - c.pos),
        ));
    }
    Trainer::with_state(model, adam, step)
}

pub fn save<R: Real>(t: &Trainer<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(t))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<R: Real>(path: impl AsRef<Path>) -> Result<Trainer<R>> {
    from_bytes(&std::fs::read(path)?)
}
