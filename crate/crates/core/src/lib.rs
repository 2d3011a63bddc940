//! Coded-aperture snapshot spectral imaging: the forward model, a FISTA
//! solver and an unfolding network with per-band adaptive step sizes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cassi;
mod error;
pub mod fista;
pub mod format;
pub mod metrics;
pub mod net;
pub mod scene;
pub mod train;

pub use cassi::{CassiOperator, CodedMask, DispersionSpec, Measurement, SpectralCube};
pub use error::{Error, Result};
