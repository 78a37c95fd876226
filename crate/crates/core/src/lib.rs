pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod lorenz96;
pub mod lyapunov;
pub mod response;

pub use error::{Error, Result};
