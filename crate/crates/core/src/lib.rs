pub mod error;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod postproc;
pub mod preprocess;
pub mod trainer;
pub mod vio;
pub mod volcore;

pub use error::{Error, Result};
