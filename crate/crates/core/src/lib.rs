//! Globally supported separating-plane barrier contact for rigid triangle meshes.

pub use nalgebra;
pub mod eval;
pub mod geometry;
pub mod kinematics;
pub mod pair_potential;
pub mod blending;
pub mod bsh;
pub mod par;
pub mod contact;
pub mod friction;
pub mod oracle;
pub mod stepper;
pub mod trajopt;
pub mod scenes;
pub mod suites;
pub mod config;
