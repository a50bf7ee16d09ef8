pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod grouper;
pub mod losses;
pub mod pipeline;
pub mod sre;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
