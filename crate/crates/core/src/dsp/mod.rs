//! Spectral analysis and the spectral training losses.

mod loss;
mod mcd;
mod mel;
mod melfile;
mod stft;

pub use loss::{
    evaluate, log_l1_from_magnitudes, loss_mag, loss_mel, loss_multires, loss_sc, sc_from_magnitudes, MultiResLoss,
    MultiResLossConfig, Resolution, LOG_FLOOR,
};
pub use mcd::{dct2, mcd, mcd_from_cepstra, mel_cepstra, MCD_CEPSTRA, MCD_MELS};
pub use mel::{hz_to_mel, log_mel, mel_from_magnitude, mel_spectrogram, mel_to_hz, MelFilterbank};
pub use melfile::{MelFile, MEL_MAGIC};
pub use stft::{spectrogram, stft_magnitude, StftConfig, Window, MAG_EPS};
