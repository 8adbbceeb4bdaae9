pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod coupling;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod polar;
pub mod raster;
pub mod retrieval;
pub mod rng;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use loss::View;
pub use model::{ModelConfig, SiameseModel};
pub use raster::Image;
pub use tensor::{Gradients, Scalar, Tape, Tensor, Var};
