//! Film grain toolkit: a Monte Carlo grain renderer for building paired
//! clean/grainy datasets, a conditional GAN grain synthesizer, blind and
//! non-blind grain removal networks, and the metrics used to evaluate them
//! (PSNR, SSIM, MS-SSIM, JSD-NSS).
//!
//! Data-parallel inner loops (rendering, convolutions over a batch, batch
//! metric evaluation) run on rayon when the `parallel` feature is enabled
//! and fall back to plain iterators otherwise. Results are identical in both
//! modes: every reduction happens in a fixed order.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod filter;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod par;
pub mod render;
pub mod rng;
pub mod synth;
pub mod training;

pub use crate::error::{Error, Result};
pub use crate::image::Image;
