//! Differentiable flat-Gaussian splatting on the CPU, with multi-view distance and
//! normal consistency regularizers, TSDF surface extraction and evaluation metrics.

pub mod gaussian;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod regularizers;
pub mod render;
pub mod surface;
mod mc_table;
pub mod synth;
pub mod trainer;
