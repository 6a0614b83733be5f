pub mod autodiff;
pub mod camera;
pub mod cli;
pub mod consistency;
pub mod error;
pub mod data;
pub mod geometry;
pub mod image;
pub mod motion;
pub mod networks;
pub mod nn;
pub mod odom;
pub mod photometric;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
