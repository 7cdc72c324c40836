//! Forward and backward kernels behind the graph operations.

pub mod attention;
pub mod conv;
pub mod norm;
