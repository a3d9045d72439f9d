//! Animatable head avatars as a canonical occupancy/color field.
//!
//! A parametric head model drives a coarse inverse-skinning deformation; a
//! learned part-based field refines it; a canonical occupancy/color MLP pair
//! is volume-rendered along camera rays. Training fits the whole stack to
//! posed images with a photometric loss plus a surface-normal regularizer.

pub mod avatar;
pub mod container;
pub mod data;
pub mod deform;
pub mod error;
pub mod field;
pub mod head;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
