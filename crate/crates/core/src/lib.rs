//! Multichannel blind source separation with joint dereverberation.
//!
//! The separation core is iterative source steering over a unified
//! dereverberation/demixing filter ([`iss`]), with an overdetermined mode that
//! uses extra microphones through an orthogonally constrained background
//! model. Around it sit STFT analysis/synthesis, a WPE dereverberation
//! baseline, BSS-eval style metrics and a seeded scene simulator.

pub mod auxiva;
pub mod error;
pub mod frontend;
pub mod iss;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod simulate;
pub mod source_model;
pub mod stft;
pub mod wav;
pub mod wpe;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use frontend::{
    build_stacked, demix, init_demix, projection_back, DemixState, SourceEstimates,
    StackedObservation,
};
pub use iss::{separate, IssConfig, Separation};
pub use source_model::{ModelVariant, SourceModelKind, WeightMask};
pub use stft::{istft, stft, MultichannelSpectrogram, StftConfig, Waveform, WindowKind};
