//! Lip-synchronous, emotion-controllable mel-spectrogram synthesis.
//!
//! The pipeline aligns lip motion with phoneme prosody through
//! cross-attention trained with a duration-level contrastive loss, expands
//! phonemes to video frames with monotonic alignment search, fuses both
//! streams with a conformer (CTC-supervised), adapts the result to a
//! speaker-conditioned acoustic prior and decodes mels with an
//! optimal-transport conditional flow. Emotion is steered at sampling time
//! by positive/negative classifier guidance.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod align;
pub mod batch;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod nn;
pub mod store;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
