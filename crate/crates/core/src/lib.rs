//! Numerical toolkit for non-commutative convolutions, convolution hemigroups,
//! chordal Loewner chains and half-plane capacity.

pub mod capacity;
pub mod convolutions;
pub mod error;
pub mod hemigroups;
pub mod loewner;
pub mod measures;
pub mod poly;
pub mod quad;
pub mod transforms;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
