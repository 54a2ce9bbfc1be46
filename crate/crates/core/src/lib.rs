//! Head mesh reconstruction from unconstrained photo collections:
//! uncalibrated photometric stereo per view cluster, integrated to depth and
//! grown outward from the frontal view with boundary constraints.

pub mod ambiguity;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod grow;
pub mod hgf;
pub mod ingest;
pub mod integrate;
pub mod manifest;
pub mod mesh;
pub mod photometric;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use mesh::HeadMesh;
