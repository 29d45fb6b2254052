pub mod archive;
pub mod assets;
pub mod candidates;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod select;
pub mod toy;
pub mod trainer;

pub use error::{CsfError, Result};
