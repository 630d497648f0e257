//! Cross-domain image translation with a spatially mixed diffusion process.

pub mod energy;
pub mod error;
pub mod field;
pub mod forward;
pub mod io;
pub mod mixfield;
pub mod nn;
pub mod predictors;
pub mod sampler;
pub mod schedules;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
pub use field::Field;
