//! Sparse-view mesh reconstruction: triplane fields fitted by volume
//! rendering, converted to an SDF, and refined through differentiable
//! dual iso-surface extraction and rasterization.

pub mod autodiff;
pub mod camera;
pub mod dataio;
pub mod campose;
pub mod error;
pub mod flexigrid;
pub mod geom;
pub mod image;
pub mod mesh;
pub mod metrics;
pub mod optfit;
pub mod raster;
pub mod triplane;
pub mod volren;

pub use error::{Error, Result};
