//! Training machinery for a two-stage LiDAR detector learning from single-class
//! supervision: frames in which only one object class is annotated.
//!
//! The pipeline runs end to end on synthetic scenes: generate frames ([`synth`]),
//! split them into single-class subsets ([`labels`]), project and voxelize
//! ([`rangeimage`], [`voxel`]), train under one of three loss schemes and four labeling
//! strategies ([`losses`], [`train`]), and score the result ([`eval`]). The [`cli`]
//! module owns every file format.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod labels;
pub mod losses;
pub mod rangeimage;
pub mod rng;
pub mod synth;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
