//! Hardware-free screen-emanation toolkit.
//!
//! The pipeline mirrors a TEMPEST screen-reading attack on a phone display
//! cable: ground-truth screens are rendered ([`raster`]), turned into a
//! simulated complex-baseband capture ([`emanator`]), reconstructed as
//! grayscale emages ([`receiver`]), cut into labeled datasets ([`dataset`]),
//! classified by a small CNN ([`classifier`]) and scored as a security-code
//! attack ([`attack`]) or as an eye-chart acuity test ([`testbed`]).
//!
//! Data-parallel loops go through [`exec::Exec`]; with the `parallel`
//! feature disabled every variant runs sequentially and produces the same
//! bytes.

pub mod attack;
pub mod classifier;
pub mod dataset;
pub mod dsp;
pub mod emanator;
pub mod error;
pub mod exec;
pub mod pgm;
pub mod profile;
pub mod raster;
pub mod receiver;
pub mod seed;
pub mod testbed;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
