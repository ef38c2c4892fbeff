pub mod akfp;
pub mod casp;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod lifelong;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
