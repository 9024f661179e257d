//! Yaw-invariant LiDAR place recognition.
//!
//! The pipeline turns a LiDAR scan into a range image by spherical
//! projection, encodes it with a width-preserving convolutional encoder, a
//! transformer module without positional encoding and a NetVLAD head, and
//! compares the resulting unit-norm descriptors by Euclidean distance. Every
//! stage before NetVLAD is equivariant to circular column shifts of the range
//! image (a yaw rotation of the sensor); NetVLAD pooling turns that into an
//! invariant descriptor.
//!
//! Modules:
//! - [`pointcloud`]: points, poses, the synthetic ray-cast world and trajectories.
//! - [`range_image`]: projection, column shifts and the overlap ground truth.
//! - [`tensor`]: a small reverse-mode autodiff tensor library.
//! - [`model`]: encoder, transformer module and descriptor generator.
//! - [`training`]: overlap tables, tuple sampling, lazy triplet loss, Adam.
//! - [`retrieval`]: descriptor database, exact search and evaluation metrics.

pub mod error;
pub mod model;
pub mod pointcloud;
pub mod range_image;
pub mod retrieval;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
