//! Online signature verification from Gramian Angular Field encodings of pen kinematics.

pub mod cli;
pub mod data;
pub mod error;
pub mod gafenc;
pub mod ingest;
pub mod metric;
pub mod nn;
pub mod synthgen;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
