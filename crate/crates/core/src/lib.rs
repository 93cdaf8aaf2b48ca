//! Volume-rendered occupancy grids: geometry, rendering with analytic
//! gradients, lidar labels, evaluation metrics, losses, direct grid fitting
//! and mesh extraction.

pub mod error;
pub mod fitter;
pub mod geometry;
pub mod image;
pub mod io;
pub mod labeler;
pub mod losses;
mod mesh_tables;
pub mod meshing;
pub mod metrics;
pub mod render;
pub mod selfcheck;
pub mod volume;

pub use error::{OccError, Result};
