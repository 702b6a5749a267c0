//! Semi-supervised multi-domain multi-task training on synthetic 3D volumes.
//!
//! Two domains are labelled for different tasks: domain 1 carries scan-level
//! labels, domain 2 carries voxel-wise ROI masks. A shared encoder feeds a
//! classification branch and a detection branch; training alternates between
//! propagating each task's labels onto the other domain and optimizing both
//! tasks jointly.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod container;
pub mod datagen;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod trainer;
