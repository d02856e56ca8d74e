pub mod container;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nfb;
pub mod numerics;
pub mod run;
pub mod synth;
pub mod train;
pub mod wcb;

pub use error::{Error, FormatError, Result};
