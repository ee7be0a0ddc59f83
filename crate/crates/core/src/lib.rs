//! Forward simulation and inversion of probe-spin coherence under π-pulse
//! dynamical decoupling.
//!
//! The forward model combines a classical Gaussian (or tabulated) noise
//! spectrum, entering through the filter function of the pulse pattern, with
//! the coherent modulation imprinted by individually resolved nuclear spins.
//! The inverse side turns coherence decays into decay rates, rates into a
//! spectrum, and modulation patterns into hyperfine couplings. An exact
//! product-state spin-bath simulation serves as ground truth for deciding
//! when the classical description holds.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluate;
pub mod filter;
pub mod forward;
pub mod io;
pub mod lsq;
pub mod model;
pub mod nuclei;
pub mod oracle;
pub mod quad;
pub mod sequences;
pub mod spectroscopy;

pub use error::{Error, Result};
