pub mod autograd;
pub mod changedetect;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub(crate) mod layers;
pub mod params;
pub mod srm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use tensor::Tensor;
