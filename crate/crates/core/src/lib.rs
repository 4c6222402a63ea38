//! Phylogeny inference from outline shapes: contour extraction, complex
//! Fourier outline descriptors, a triplet-trained encoder, distance trees and
//! tree comparison metrics.

pub mod config;
pub mod encoder;
pub mod error;
pub mod fourier;
pub mod matching;
pub mod metrics;
pub mod newick;
pub mod phylo;
pub mod pipeline;
pub mod shape_io;
pub mod synth;
pub mod tree;

pub use error::{Error, ErrorClass, Result};
