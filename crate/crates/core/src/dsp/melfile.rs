use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MEL_MAGIC: &[u8; 6] = b"WGMEL1";

/// Natural-log mel condition as stored on disk: frame-major `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFile {
    pub n_mels: u32,
    pub n_frames: u32,
    pub sample_rate: u32,
    pub hop_size: u32,
    pub data: Vec<f32>,
}

impl MelFile {
    /// Build from a `[n_mels, frames]` tensor.
    pub fn from_condition<R: Real>(mel: &Tensor<R>, sample_rate: u32, hop_size: u32) -> Result<Self> {
        let s = match mel.shape() {
            [m, f] => [*m, *f],
            [1, m, f] => [*m, *f],
            other => {
                return Err(Error::dim(
                    "mel file",
                    format!("expected [n_mels, frames], got {other:?}"),
                ))
            }
        };
        let (nm, frames) = (s[0], s[1]);
        let mut data = vec![0.0f32; nm * frames];
        for m in 0..nm {
            for f in 0..frames {
                data[f * nm + m] = mel.data()[m * frames + f].as_f32();
            }
        }
        Ok(MelFile {
            n_mels: nm as u32,
            n_frames: frames as u32,
            sample_rate,
            hop_size,
            data,
        })
    }

    /// `[1, n_mels, frames]`, the layout the model consumes.
    pub fn condition<R: Real>(&self) -> Tensor<R> {
        let (nm, frames) = (self.n_mels as usize, self.n_frames as usize);
        Tensor::from_fn(&[1, nm, frames], |i| {
            let (m, f) = (i / frames, i % frames);
            R::of(self.data[f * nm + m] as f64)
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MEL_MAGIC)?;
        for v in [self.n_mels, self.n_frames, self.sample_rate, self.hop_size] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("mel file", "truncated header"))?;
        if &magic != MEL_MAGIC {
            return Err(Error::format("mel file", "bad magic"));
        }
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|_| Error::format("mel file", "truncated header"))?;
        let field = |i: usize| u32::from_le_bytes(head[i * 4..i * 4 + 4].try_into().unwrap());
        let (n_mels, n_frames, sample_rate, hop_size) = (field(0), field(1), field(2), field(3));
        if n_mels == 0 || n_frames == 0 || sample_rate == 0 || hop_size == 0 {
            return Err(Error::format("mel file", "zero-sized header field"));
        }
        let count = n_mels as usize * n_frames as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != count * 4 {
            return Err(Error::format(
                "mel file",
                format!("expected {} data bytes, found {}", count * 4, body.len()),
            ));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("mel file", "non-finite value"));
        }
        Ok(MelFile {
            n_mels,
            n_frames,
            sample_rate,
            hop_size,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let mel = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32);
        let f = MelFile::from_condition(&mel, 22050, 200).unwrap();
        // frame-major: frame 0 holds bands 0,1,2 = 0,4,8
        assert_eq!(&f.data[..3], &[0.0, 4.0, 8.0]);
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 6 + 16 + 12 * 4);
        assert_eq!(&bytes[..6], b"WGMEL1");
        assert_eq!(&bytes[6..10], &3u32.to_le_bytes());
        let back = MelFile::read_from(&bytes[..]).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.condition::<f32>().data(), mel.data());
    }

    #[test]
    fn rejects_corrupt_input() {
        let f = MelFile::from_condition(&Tensor::<f32>::ones(&[2, 2]), 16000, 100).unwrap();
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert!(MelFile::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MelFile::read_from(&bad[..]).is_err());
        assert!(MelFile::read_from(&bytes[..10]).is_err());
    }
}
