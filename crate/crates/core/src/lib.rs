//! Numerical laboratory for asymptotic morphisms on the Heisenberg group.
//!
//! The crate is organised along the objects it manipulates:
//!
//! * [`heisenberg`] exact group arithmetic of `H_n`, dilations and vector fields;
//! * [`expr`] the closed-form expression language used for symbols and test functions;
//! * [`lattice`] grids, sampled functions, quadrature and the fiberwise Fourier transform;
//! * [`groupoid`] convolution kernels, compact operators and norm estimation;
//! * [`morphisms`] the Heisenberg and abelian asymptotic morphisms and their defects;
//! * [`hypoelliptic`] model operators, Rockland checks, Cayley transforms and indices.

pub mod error;
pub mod expr;
pub mod groupoid;
pub mod heisenberg;
pub mod hypoelliptic;
pub mod lattice;
pub mod linalg;
pub mod morphisms;
pub mod par;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
