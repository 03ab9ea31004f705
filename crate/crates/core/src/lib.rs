//! Known-operator retinal vessel pipeline.
//!
//! A small U-Net preprocessing network is trained jointly with a
//! differentiable eight-scale Frangi vesselness network on fundus images;
//! the trained preprocessing network is then applied unchanged to OCT-A en
//! face projections, and a blinded reader-study backend collects and
//! summarizes expert grades of the raw, enhanced and blended images.

pub mod checkpoint;
pub mod error;
pub mod frangi;
pub mod fundus;
pub mod model;
pub mod octa;
pub mod params;
pub mod phantom;
pub mod raster;
pub mod study;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
