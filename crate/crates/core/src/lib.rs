pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod registry;
pub mod run;
pub mod scan;

pub use error::{Error, Result};
