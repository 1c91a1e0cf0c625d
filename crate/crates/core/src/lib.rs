pub mod corpus;
pub mod dpcl;
pub mod engine;
mod error;
pub mod evaluate;
pub mod geometry;
pub mod gndiff;
pub mod numkit;

pub use error::ModelError;
