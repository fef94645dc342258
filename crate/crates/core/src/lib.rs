pub mod bottleneck;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod features;
pub mod formats;
pub mod fusion;
pub mod network;
pub mod numerics;
pub mod pipeline;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
