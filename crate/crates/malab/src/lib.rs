pub mod domain;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod measure;
pub mod regularity;
pub mod report;
pub mod sections;
pub mod solver;
pub mod wang;

pub use error::{Error, Result};
