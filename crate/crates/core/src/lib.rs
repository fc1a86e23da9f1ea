//! Group-invariant local feature descriptors.
//!
//! An image is warped by every element of a sampled scale/rotation grid,
//! each warp goes through a small CNN, and the features sampled at an
//! interest point form a *group feature*. Two stacks of group convolutions
//! process it, and bilinear pooling over the grid yields a 128-dimensional
//! descriptor that is invariant to the group action.

pub mod backbone;
pub mod descriptor_file;
pub mod error;
pub mod eval;
pub mod group;
pub mod image_io;
pub mod pipeline;
pub mod selftest;
pub mod tensor;
pub mod textures;
pub mod trainer;

pub use error::{Error, Result};
