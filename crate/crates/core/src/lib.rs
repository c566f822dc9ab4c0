//! Image-based spacecraft docking with action-chunking transformer policies.

pub mod cli;
pub mod config;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod expert;
pub mod io;
pub mod policy;
pub mod render;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
