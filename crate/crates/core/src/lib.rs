//! Numerical laboratory for the stability and superstability of Jordan
//! `*`-homomorphisms between finite-dimensional C*-algebras.
//!
//! The algebras are `M_n(C)` with the conjugate transpose as involution and
//! the spectral norm. On top of that the crate provides
//!
//! * [`mappings`]: exact Jordan `*`-homomorphisms and controlled perturbations,
//! * [`checkers`]: residuals of the three-term functional inequality and
//!   equation, the additivity derivation and the superstability decay,
//! * [`stabilizer`]: the rescaling iterations `3^{±n} f(3^{∓n} a)`, their
//!   Cauchy traces and the closed-form and series error bounds,
//! * [`harness`]: the JSON-configured experiment runner behind the `stablab`
//!   binary.
//!
//! The guide in `book/` walks through each part; its code listings are
//! compiled and run as doctests of this crate.

pub mod algebra;
pub mod checkers;
pub mod error;
pub mod harness;
pub mod mappings;
pub mod parallel;
pub mod sampling;
pub mod stabilizer;

pub use algebra::{op_norm, random_element, AlgebraSpec, Element, UnitScalar};
pub use error::{Error, Result};
pub use mappings::{DirectionField, MapKind, MapSpec, Mapping, PerturbationMode, PerturbationSpec};
pub use sampling::{MuGrid, SampleSpec};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/algebra.md")]
    mod algebra {}
    #[doc = include_str!("../../../book/src/mappings.md")]
    mod mappings {}
    #[doc = include_str!("../../../book/src/checkers.md")]
    mod checkers {}
    #[doc = include_str!("../../../book/src/stabilizer.md")]
    mod stabilizer {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
