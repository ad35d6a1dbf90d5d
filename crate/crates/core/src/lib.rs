//! Precipitation nowcasting from geostationary satellite imagery.

pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod phydnet;
pub mod synthetic;
pub mod train;
pub mod unet;

pub use error::{Error, FormatError, Result};
