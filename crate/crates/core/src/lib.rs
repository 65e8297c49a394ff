pub mod attention;
pub mod autodiff;
pub mod composer;
pub mod dataset;
pub mod encoder;
pub mod finetune;
pub mod harness;
pub mod imaging;
pub mod probe;
pub mod error;

pub use error::{Error, Result};
