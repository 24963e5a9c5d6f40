pub mod bev;
pub mod codec;
pub mod control;
pub mod error;
pub mod garage;
pub mod harness;
pub mod geometry;
pub mod link;
pub mod perception;
pub mod seed;

pub use error::{Error, Result};
