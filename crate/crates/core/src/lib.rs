//! Quadratic variation along finitely refining partition sequences.
//!
//! The crate builds nested partitions of `[0, T]`, the non-uniform Haar and
//! Schauder systems attached to them, and computes quadratic variation both
//! from increments and from Schauder coefficients.

pub mod basis;
pub mod error;
pub mod experiments;
pub mod partition;
pub mod qv;
pub mod sum;
pub mod synthesis;

pub use error::{QvError, Result};
