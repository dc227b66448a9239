//! Depth popping for salient object detection: pop-out losses, the separation
//! map, the two networks, saliency metrics and a synthetic RGB-D generator.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod separation;
pub mod synth;
pub mod train;

pub use error::{PopError, Result};
pub use grid::{BinaryMask, DepthConvention, DepthMap, Grid, Real, RgbImage, SoftMask};
pub use networks::{NetConfig, PopNet, TotalLossWeights};
pub use separation::{ContactSurface, SeparationConfig};
