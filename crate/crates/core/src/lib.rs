//! Reinforcement-learned viewport scanpaths for blind 360° image quality
//! assessment.
//!
//! A recurrent policy picks a sequence of viewports on an equirectangular
//! panorama; an attention-pooled assessor scores each sequence; both are
//! trained jointly with PPO and a rank-consistent loss stack. A procedural
//! panorama generator with a closed-form quality oracle supplies verifiable
//! data.

pub mod assessor;
pub mod config;
pub mod diffcore;
pub mod distortions;
pub mod env;
pub mod features;
pub mod heatmap;
mod error;
pub mod image_ops;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod sphere;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
