//! Spatio-temporal traffic speed forecasting with multi-granularity
//! temporal attention around Chebyshev spectral graph convolution.

pub mod attention;
pub mod data;
pub mod diffcore;
pub mod graphspec;
pub mod model;
pub mod trainer;
mod error;

pub use error::{Error, Result};
