//! Online Laplace approximation with Kronecker-factored curvature for
//! continual learning in small ReLU networks.

pub mod checkpoint;
pub mod curvature;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod network;
pub mod numerics;
pub mod posterior;
pub mod trainer;

pub use error::{Error, Result};
