pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod ggnn;
pub mod gradsuite;
pub mod heatmap;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod report;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
