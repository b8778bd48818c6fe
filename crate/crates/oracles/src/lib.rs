//! Reference oracles for the goalplay test suites.
//!
//! Nothing here depends on `goalplay-core`: the grid rules are re-stated from
//! scratch as a straight-line interpreter, GAE is computed from its
//! definitional sum, and gradients by central differences. Tests convert core
//! types into these plain structures and compare.

pub mod fd;
pub mod gae;
pub mod grid;
pub mod stats;
