//! Generative retrieval with document identifiers learned jointly with the
//! retrieval model.

pub mod config;
pub mod criteria;
pub mod error;
pub mod evalkit;
pub mod fsio;
pub mod ids;
pub mod idstore;
pub mod indexer;
pub mod model;
pub mod params;
pub mod seed;
pub mod sinkhorn;
pub mod textdata;
pub mod trainer;

pub use diffcore;
pub use error::{Error, Result};
pub use ids::{DocId, IdSpace};
