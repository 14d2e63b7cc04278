//! Signal-propagation laboratory for decoder-only Transformers.
//!
//! The crate measures three failure modes of causal attention stacks on
//! small, fully controlled models:
//!
//! * [`collapse`]: final-token representations of a sequence and of the same
//!   sequence with its last token repeated converge as the length grows, and
//!   become bitwise identical under reduced precision.
//! * [`squash`]: the sensitivity of the last output to input tokens is
//!   bounded by a sum over monotone attention paths, and repeated mixing
//!   concentrates it on the first token.
//! * [`counting`]: without positional information and causal masking,
//!   attention only sees symbol ratios, so it cannot count.
//!
//! [`harness`] turns these into reproducible CSV sweeps and SVG plots, and
//! [`selftest`] runs the full acceptance battery.

pub mod error;
pub mod numerics;
pub mod rng;
pub mod posenc;
pub mod model;
pub mod collapse;
pub mod squash;
pub mod counting;
pub mod harness;
pub mod selftest;

pub use error::{LabError, Result};
pub use model::{AttentionMask, AttentionStack, ForwardTrace, LayerWeights, ModelConfig, NormKind, TokenSequence, Transformer};
pub use numerics::{FloatFormat, Mat64};
pub use posenc::{PeScheme, PositionalEncoding};
