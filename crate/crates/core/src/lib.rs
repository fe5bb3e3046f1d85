//! Semi-supervised mixture invariant training (MixIT) for monaural speech
//! enhancement.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`audio_io`]: 16 kHz mono PCM waveform files and JSON-lines manifests.
//! * [`dsp`]: square-root-Hann STFT analysis/synthesis.
//! * [`mixer`]: dynamic SNR-controlled mixture generation and a synthetic corpus.
//! * [`model`]: a small U-shaped complex spectral mapping network with a
//!   dilated temporal convolution bottleneck and hand-written backward pass.
//! * [`loss`]: the constrained mixture invariant CSM loss.
//! * [`trainer`]: Adam with plateau halving, validation by SNR improvement,
//!   checkpointing and best-model selection.
//! * [`postproc`]: speaker-reinforcement remixing and SNR metrics.

pub mod audio_io;
pub mod checkpoint;
pub mod config;
pub mod dsp;
mod error;
pub mod gradcheck;
pub mod loss;
pub mod mixer;
pub mod model;
pub mod postproc;
pub mod tensor;
pub mod trainer;

pub use audio_io::{AudioClip, Manifest, ManifestEntry, SourceKind, SAMPLE_RATE};
pub use dsp::{Spectrogram, StftConfig};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, LossMode, MixingMatrix};
pub use mixer::{ExampleKind, MixExample, SamplerConfig};
pub use model::{ModelConfig, SourceEstimates};
pub use tensor::{Parameters, Tensor};
