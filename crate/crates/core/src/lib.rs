//! Level-set segmentation: the classic Chan-Vese solver and its recurrent,
//! trainable reformulation, plus the data and benchmark tooling around them.

pub mod bench;
pub mod cls;
pub mod error;
pub mod grid;
mod linalg;
pub mod pgm;
pub mod rls;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use grid::{EpsParam, Field};
