//! Long-range graph filtering with hybrid polynomial + truncated-spectral
//! wavelets.
//!
//! The crate builds normalized-Laplacian filter banks whose response splits
//! into a Chebyshev polynomial part (sparse, strictly local) and a low-rank
//! spectral part (dense in frequency, global in reach), wires them into a
//! small message-free network, and trains that network with a hand-rolled
//! reverse-mode gradient engine.

pub mod codec;
pub mod dense;
pub mod error;
pub mod filters;
pub mod graph;
pub mod network;
pub mod spectral;
pub mod synth;
pub mod training;

pub use dense::Mat;
pub use error::{Error, Result};
pub use graph::{build_normalized_laplacian, Graph, NormalizedLaplacian};
pub use spectral::{dense_evd, partial_evd, DenseEvd, PartialEvd};
