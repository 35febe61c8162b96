//! Delay-Doppler sensing toolkit.
//!
//! The crate covers the whole processing chain for a SISO channel estimate:
//! forward synthesis of multipath snapshots ([`signal`]), randomized datasets
//! and bistatic groundtruth ([`scenario`]), multitaper delay-Doppler features
//! ([`preproc`]), a classical iterative detector ([`detector`]), a small
//! trainable heatmap network ([`neural`]), and the measurement-style
//! evaluation protocol ([`evaluation`]). Binary exchange formats live in [`io`].

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod neural;
pub mod preproc;
pub mod scenario;
pub mod signal;

pub use error::{Error, ErrorKind, Result};
