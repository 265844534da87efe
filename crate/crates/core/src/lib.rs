pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod miram;
pub mod params;
pub mod tensor;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
