//! Face synthesis from a morphable mesh and learned variational neural textures.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod raster;
pub mod synthdata;

pub use error::{Error, Result};
