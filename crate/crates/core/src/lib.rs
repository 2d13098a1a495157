//! Matrix-product-operator simulator for one-dimensional lattice Bose gases
//! with particle loss.
//!
//! The density operator of an open bosonic chain is stored as a matrix
//! product state in superket form and evolved with a second-order
//! Trotterized propagator built from nearest-neighbour generators that
//! combine coherent hopping, on-site interaction and local dissipation.
//! A dense brute-force propagator over small chains serves as the
//! correctness oracle for every approximation the network route makes.

pub mod checkpoint;
pub mod evolve;
pub mod experiment;
pub mod initial;
pub mod model;
pub mod mps;
pub mod observables;
pub mod oracle;
pub mod tensor;

pub use num_complex::Complex64 as C64;
