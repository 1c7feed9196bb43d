//! Pose-free novel view synthesis from an unposed image pair.
//!
//! The pipeline estimates dense correspondences, the relative camera pose and
//! a novel rendered view from two input images, sharing a single all-pairs
//! cost volume across the three tasks. Every stage is deterministic given a
//! seed and is verified against synthetic-scene oracles in [`synth`].
//!
//! Module map:
//! - [`geometry`]: SO(3)/SE(3) types, pinhole projection, epipolar geometry
//! - [`imaging`]: image container, bilinear sampling, warping, SSIM/PSNR/MSE
//! - [`pyramid`]: deterministic multi-level feature extraction
//! - [`correlation`]: 4D cost volumes, attention aggregation, level fusion
//! - [`matching`]: argmax flow and cyclic-consistency confidence masks
//! - [`posehead`]: essential-matrix module and 6D-rotation pose regression
//! - [`renderer`]: epipolar-line attention rendering
//! - [`losses`]: training objectives and gradient verification
//! - [`synth`]: synthetic scenes providing ground truth for every test
//! - [`eval`]: frame-skip pair selection, overlap splits, metric summaries
//! - [`commands`]: the CLI entry points (`synth`/`estimate`/`render`/`eval`/`check`)

pub mod commands;
pub mod config;
pub mod correlation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod matching;
pub mod pipeline;
pub mod posehead;
pub mod pyramid;
pub mod renderer;
pub mod scene_io;
pub mod synth;
pub mod weights;

pub use config::Config;
pub use error::{Error, Result};
