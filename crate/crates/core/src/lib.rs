//! Locally c-optimal approximate designs for models whose Fisher information at a point
//! is a sum of several rank-one terms, computed through the generalized Elfving set.
//!
//! The pipeline: [`model`] turns expressions into information vectors, [`elfving`]
//! finds the largest multiple of the target inside the Elfving set by linear
//! programming, [`solver`] extracts and polishes a design, and [`verify`] certifies
//! it with the equivalence theorem.

pub mod cli;
pub mod design;
pub mod elfving;
pub mod expr;
pub mod model;
pub mod simulate;
pub mod solver;
pub mod verify;

pub(crate) fn serialize_dvector<S: serde::Serializer>(
    v: &nalgebra::DVector<f64>,
    s: S,
) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}
