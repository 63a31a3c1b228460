//! Multipole attention neural operator and a Darcy-flow benchmark.

pub mod attention;
pub mod bench;
pub mod config;
pub mod darcy;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod multipole;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
