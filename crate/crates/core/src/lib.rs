pub mod baseline;
pub mod channel;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod framesync;
pub mod io;
pub mod kv;
pub mod nets;
pub mod nn;
pub mod params;
pub mod training;

pub use error::{Error, Result};
