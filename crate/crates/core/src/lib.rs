pub mod acoustics;
pub mod adaptation;
pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod par;
pub mod pipeline;
pub mod tracker;

pub use error::{Error, Result};
