pub mod error;
pub mod distill;
pub mod gradcheck;
pub mod metrics;
pub mod grid;
pub mod harness;
pub mod nets;
pub mod par;
pub mod synthdata;
pub mod tape;

pub use error::{Error, Result};
pub use grid::{Grid, Shape};
