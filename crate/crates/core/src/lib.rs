//! Transformable volumetric bottleneck networks at desk scale.

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod image;
pub mod io;
pub mod losses;
mod mc_table;
pub mod net;
pub mod recon;
pub mod scalar;
pub mod scenes;
pub mod script;
pub mod train;
pub mod volume;

pub use error::{Result, TbnError};
pub use scalar::Real;

pub type FeatureVolume32 = volume::FeatureVolume<f32>;
pub type FeatureVolume64 = volume::FeatureVolume<f64>;
pub type FlowField32 = volume::FlowField<f32>;
pub type FlowField64 = volume::FlowField<f64>;
pub type ImagePlane32 = image::ImagePlane<f32>;
pub type ImagePlane64 = image::ImagePlane<f64>;
pub type TbnModel32 = net::TbnModel<f32>;
pub type TbnModel64 = net::TbnModel<f64>;
pub type Dataset32 = scenes::Dataset<f32>;
pub type Dataset64 = scenes::Dataset<f64>;
