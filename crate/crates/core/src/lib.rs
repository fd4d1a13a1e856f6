//! Perturbative optical response of Frenkel exciton aggregates coupled to
//! structured non-Markovian baths, computed with the dyadic nonlinear
//! hierarchy of pure states and cross-checked against the hierarchical
//! equations of motion.

pub mod bath;
pub mod grid;
pub mod heom;
pub mod hops;
pub mod model;
pub mod noise;
pub mod response;
pub mod rng;
pub mod spectra;
pub mod stats;

pub use num_complex::Complex64 as C64;
