//! Analytic transformer constructions for clustering and PCA.
//!
//! The crate has two halves that are meant to be checked against each other:
//!
//! * **Classical side** — exact reference implementations of Lloyd's
//!   algorithm, k-means++ seeding, spectral initialisation and top-k power
//!   iteration with deflation ([`classical`]), plus the synthetic Gaussian
//!   mixture generator and clustering metrics ([`gmm`]).
//! * **Transformer side** — a small attention/MLP forward engine
//!   ([`transformer`]) together with *constructed* (not trained) weights
//!   ([`construct`]) that execute the same algorithms inside the forward
//!   pass. Nonlinear pieces (norms, reciprocals) are realised with fitted
//!   random-feature atoms ([`approx`]).
//!
//! Everything is deterministic given a seed; the `parallel` feature (on by
//! default) switches the embarrassingly parallel panels to rayon.

pub mod approx;
pub mod classical;
pub mod construct;
pub mod gmm;
pub mod linalg;
pub mod parallel;
pub mod transformer;

pub use linalg::Mat;
