pub mod attacks;
pub mod controller;
pub mod error;
pub mod gains;
pub mod integrator;
pub mod linalg;
pub mod observer;
pub mod report;
pub mod safety;
pub mod scenario;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
