//! Multi-view plane-sweep depth estimation built on a multiplane mask
//! representation.
//!
//! The pipeline: choose sweep planes ([`sampling`]), warp each neighbour
//! view onto them ([`geometry`]), predict per-plane masks and fuse them
//! across neighbours ([`masks`], [`neural`]), then regress inverse depth.
//! [`evalkit`] renders synthetic scenes with exact ground truth and scores
//! predictions; [`io`] holds the on-disk formats.

pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod io;
pub mod masks;
pub mod neural;
pub mod sampling;

pub use error::{Error, Result};
