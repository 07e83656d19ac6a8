//! Position-aware contrastive alignment for referring image segmentation,
//! trained from scratch on synthetic shape scenes.

pub mod autograd;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod maskhead;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pam;
pub mod render;
pub mod rng;
pub mod synthdata;
pub mod transformer;

pub use error::{PcanError, Result};
