//! Data-side toolkit for cross-lingual speech anti-spoofing experiments.
//!
//! The crate covers everything that does not need a neural network:
//! utterance manifests and their split/merge/downsample arithmetic, the
//! accent-based TTS expansion pipeline, waveform augmentation, feature
//! extraction, EER evaluation and the cross-lingual test-set builders.

pub mod accent_expand;
pub mod audio;
pub mod augment;
pub mod eval;
pub mod frontend;
pub mod manifest;
pub mod seed;
pub mod testset_builders;

pub use audio::Waveform;
pub use manifest::{Label, Manifest, Portion, UtteranceRecord};
