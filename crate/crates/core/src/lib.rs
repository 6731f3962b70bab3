//! Single-image 3D human pose and mesh recovery at desk scale.

pub mod backbone;
pub mod body;
pub mod config;
pub mod container;
pub mod error;
pub mod graph;
pub mod losses;
pub mod mesh_io;
pub mod model;
pub mod mte;
pub mod nn;
pub mod sparse;
pub mod synth;
pub mod template;
pub mod tokenizer;
pub mod trainer;
pub mod topology;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use sparse::SparseMatrix;
