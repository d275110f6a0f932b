pub mod attack;
pub mod binio;
pub mod captioner;
pub mod config;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod pipeline;
pub mod seeds;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
