//! Style-encoder pre-training toolkit.
//!
//! The crate covers the whole offline pipeline for learning speaker-independent
//! speaking-style embeddings:
//!
//! - [`audio_io`]: WAV ingestion, resampling and export.
//! - [`dsp`]: STFT/mel frontend, cepstral envelopes, formant shifting and
//!   random slicing.
//! - [`pitch`]: YIN F0 tracking, frame energy, per-speaker statistics and
//!   semitone correction.
//! - [`encoder`]: convolutional-recurrent reference encoder with hand-written
//!   backpropagation.
//! - [`metric`]: prototypical angular loss, RAdam and the training loop.
//! - [`styles`]: centroids, nearest-centroid classification, SECS, leakage
//!   probing and PCA projection.
//! - [`toygen`]: a deterministic source-filter voice generator used as a
//!   built-in corpus.
//! - [`pipeline`]: the subcommands behind the `stylekit` binary.

pub mod audio_io;
pub mod dsp;
pub mod encoder;
pub mod fsutil;
pub mod metric;
pub mod pipeline;
pub mod pitch;
pub mod styles;
pub mod toygen;

pub use audio_io::Waveform;
pub use dsp::{MelSpectrogram, StftConfig};

