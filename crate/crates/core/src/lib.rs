//! Monte Carlo simulation of molecular communication via diffusion in a
//! flowing cylindrical vessel.
//!
//! The crate covers the whole chain: drift-diffusion particle transport to an
//! absorbing receiver ([`geometry`]), channel characterization
//! ([`channel`]), BCSK and BCSK-CPA modulation ([`modulation`]), simulated
//! and Gaussian-approximation bit error rates ([`ber`]), MOL-Eye diagrams and
//! their metrics ([`moleye`]), and experiment orchestration ([`runner`]).

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ber;
pub mod channel;
pub mod error;
pub mod geometry;
pub mod link;
pub mod modulation;
pub mod moleye;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
