pub mod cli;
pub mod diarize;
pub mod encoder;
pub mod error;
pub mod features;
pub mod io;
pub mod layers;
pub mod model;
pub mod pooldec;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{ModelConfig, TitaNet};
