pub mod checks;
pub mod data;
pub mod error;
pub mod experiments;
pub mod mirror;
pub mod network;
pub mod numerics;
pub mod rules;
pub mod theory;

pub use error::{FlabError, Result};
