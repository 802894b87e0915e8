//! Exact dense laboratory for discrete diffusion with mixture denoisers and
//! consistency distillation on small product state spaces `S^D`.

pub mod dist;
pub mod error;
pub mod forward;
pub mod posterior;
pub mod denoisers;
pub mod losses;
pub mod trainer;
pub mod samplers;
pub mod theory;

pub use error::{Error, Result};
