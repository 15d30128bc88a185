//! Transformations of polynomial ensembles under addition of a GUE matrix and
//! multiplication by Ginibre or truncated unitary matrices.

pub mod linalg;
pub mod poly;
pub mod ensemble;
pub mod quad;
pub mod special;
pub mod transform;
pub mod closed;
pub mod montecarlo;
pub mod cli;
