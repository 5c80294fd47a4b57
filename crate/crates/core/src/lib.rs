//! Mixture-density object detection with uncertainty-driven active learning.
//!
//! The crate covers the whole pipeline on a synthetic shape-detection task:
//! scene generation ([`scenes`]), a small single-shot detector with Gaussian
//! mixture heads ([`detector`]), its training objectives ([`losses`],
//! [`train`]), aleatoric/epistemic scores ([`uncertainty`]), pool scoring and
//! baselines ([`acquisition`]) and the experiment loop ([`harness`]).

pub mod acquisition;
pub mod bbox;
pub mod cli;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod scenes;
pub mod seed;
pub mod train;
pub mod uncertainty;

pub use error::{MdalError, Result};
