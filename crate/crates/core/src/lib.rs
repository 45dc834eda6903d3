pub mod bayes_opt;
pub mod error;
pub mod experiment;
pub mod forward_ops;
pub mod image;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, Mask};
