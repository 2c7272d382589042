pub mod attribution;
pub mod dual;
pub mod embeddings;
pub mod error;
pub mod geomemory;
pub mod geometry;
pub mod graph;
pub mod navigation;
pub mod perception;
pub mod propagation;
pub mod raster;
pub mod rtree;
pub mod seed;
pub mod session;
pub mod time;
pub mod vector;
pub mod workspace;


pub use error::{Error, Result};
