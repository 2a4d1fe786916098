//! Convolution kernel redundancy analysis.
//!
//! Measures how similar the kernels of each convolution layer are to one
//! another (a luminance-damped SSIM variant averaged over input channels),
//! summarizes that as the fraction of kernel pairs above a similarity
//! threshold, and turns the result into smaller layer widths with exact
//! parameter accounting.
//!
//! - [`tensor_io`]: weight archive loading.
//! - [`ssim`]: patch statistics and similarity measures.
//! - [`demo`]: noise and luminance-shift demonstration.
//! - [`ckrm`]: pairwise kernel similarity and the redundancy measure.
//! - [`structure`]: layer dimensions, parameter counts, width suggestions.
//! - [`report`]: analysis pipeline, report files and histogram plots.

pub mod ckrm;
pub mod demo;
pub mod error;
pub mod report;
pub mod ssim;
pub mod structure;
pub mod tensor_io;

pub use error::{Error, Result};
