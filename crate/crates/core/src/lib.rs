//! Simulation and optimization toolkit for a flexible-coupler antenna array.
//!
//! The array consists of `N` active antennas sliding along a single rail. Each
//! antenna reshapes its radiation pattern by moving passive couplers, which is
//! modelled as selecting one column of a fixed pattern dictionary.
//!
//! Two decisions are made on different timescales:
//!
//! * fast: the per-antenna pattern, chosen to maximize the ergodic sum rate
//!   over sampled multipath channels ([`beamform`]);
//! * slow: the antenna positions, chosen by projected gradient ascent on a
//!   learned surrogate of the already-optimized sum rate ([`surrogate`],
//!   [`posopt`]).
//!
//! Channels come from a geometric scattering-cluster model ([`scenario`],
//! [`channel`]). The [`experiments`] module wires the pieces into baseline
//! schemes and parameter sweeps.

pub mod beamform;
pub mod channel;
pub mod error;
pub mod experiments;
pub mod posopt;
pub mod rng;
pub mod scenario;
pub mod surrogate;

pub use error::{Error, Result};

pub use nalgebra::Complex;

/// Complex double used for every channel coefficient.
pub type C64 = Complex<f64>;
