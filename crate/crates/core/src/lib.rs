//! Compressed normalizing-flow vocoder with a dilated-convolution post-filter.
//!
//! The flow maps grouped audio to Gaussian noise through a stack of
//! transformations that each own an invertible 1x1 convolution but share a
//! single affine coupling network. Synthesis runs the flow backwards from
//! sampled noise and hands the result to a non-causal post-filter trained with
//! multi-resolution spectral losses.
//!
//! Module map:
//! - [`tensor`]: arrays, autodiff tape, Adam.
//! - [`dsp`]: STFT, mel filterbanks, spectral losses, MCD, the mel-condition file format.
//! - [`nn`]: convolution layers, condition upsampler, gated dilated stack.
//! - [`flow`]: grouping, condition upsampling, shared coupling, forward/inverse flow, likelihood.
//! - [`postfilter`]: the parallel refinement network.
//! - [`model`]: the two halves together with their parameter store.
//! - [`config`], [`data`], [`trainer`], [`checkpoint`]: configuration, toy data, joint training, persistence.
//! - [`wav`], [`bench`]: audio file I/O and throughput measurement used by the CLI.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod model;
pub mod nn;
pub mod par;
pub mod postfilter;
pub mod real;
pub mod tensor;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
pub use real::Real;
