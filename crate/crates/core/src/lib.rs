pub mod data;
pub mod error;
pub mod label_decoder;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod run;
pub mod vae_align;

pub use error::{Error, Result};
