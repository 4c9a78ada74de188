//! Characterisation and two-photon simulation of phase-tunable three-port
//! photonic interferometers.
//!
//! The pipeline runs from classical single-photon fringes to a calibrated
//! [`device::DeviceModel`], from there to two-photon predictions
//! ([`interference`]) and Fisher information ([`fisher`]), and back to
//! measured visibilities ([`homscan`]). [`experiment`] generates synthetic
//! data for every step; [`formats`] reads and writes the on-disk files.

// Negated comparisons are used on purpose so that NaN fails validation;
// small matrix kernels read better with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod device;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod formats;
pub mod homscan;
pub mod interference;
pub mod linalg;
pub mod simplex;

pub use error::{Error, Result};
