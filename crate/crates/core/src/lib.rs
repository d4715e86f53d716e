//! Efficient articulated neural radiance fields: kinematics, tri-plane
//! fields, volume rendering with analytic gradients, and training.

pub mod checkpoint;
pub mod decoder;
pub mod diffengine;
pub mod error;
pub mod image;
pub mod kinematics;
pub mod model;
pub mod objectives;
pub mod renderer;
pub mod train;
pub mod triplane;

pub use error::{Error, Result};
pub use image::Image;
