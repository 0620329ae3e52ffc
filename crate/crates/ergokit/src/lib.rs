//! Numerical toolkit for stability, sensitivity, and spectral analysis of
//! nonlinear state-space Markov chains `X(t+1) = a(X(t), N(t+1))`.
//!
//! The crate is organised around a handful of computational objects:
//!
//! * [`model`]: the state-space map `a`, its state Jacobian, and the noise law;
//! * [`simulate`]: joint simulation of the chain and its sensitivity process
//!   `S(t)`, Lyapunov exponents, and contraction diagnostics;
//! * [`semigroup`]: Monte Carlo estimators for `P^t f` and for the gradient
//!   semigroup `Q^t g = E[S^T(t) g(X(t))]`, with a common-random-numbers
//!   finite-difference cross-check of the identity `grad P^t f = Q^t grad f`;
//! * [`valuefn`]: Poisson-equation and discounted value-function solvers on
//!   discretized kernels, gradient series, and CLT variance;
//! * [`norms`]: weighted supremum norms, first-order (Sobolev-style) variants,
//!   dual measure norms, induced operator norms, and geometric decay fits;
//! * [`drift`]: the nonlinear generator `H(F) = log(P e^F) - F` and
//!   drift-condition verification on grids;
//! * [`kernelgrid`]: quadrature discretization of transition kernels, smooth
//!   cutoffs, truncation, spectra, eigenprojections, and finite-rank
//!   approximations;
//! * [`bernstein`]: tensor-product Bernstein polynomial approximation with
//!   exact coefficient-difference gradients.
//!
//! All stochastic routines draw from counter-based substreams keyed by
//! `(master seed, replication index)`, so results are bit-identical across
//! reruns and across worker counts.
//!
//! The crate is `no_std`-compatible (with `alloc`) when built with
//! `--no-default-features`; the `std` and `parallel` features are on by
//! default.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(missing_docs)]

extern crate alloc;

pub mod bernstein;
pub mod drift;
mod error;
pub mod kernelgrid;
pub mod model;
pub mod norms;
mod par;
mod quad;
pub mod rng;
pub mod semigroup;
pub mod simulate;
pub mod valuefn;

pub use error::{ErgoError, Result};

pub use nalgebra::{Complex, DMatrix, DVector};
