#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Image representation with 2D Gaussians: rasterization, fitting and
//! structured initialization from sampled point meshes.

pub mod dither;
pub mod error;
pub mod g2di;
pub mod gaussian;
pub mod geometry;
pub mod imagery;
pub mod metrics;
pub mod ppm;
pub mod raster;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
pub use gaussian::{Gaussian2D, GaussianSet};
pub use imagery::{ImageBuffer, NdcPos, PixelPos, ScalarGrid};
pub use ppm::ProbabilityMap;
