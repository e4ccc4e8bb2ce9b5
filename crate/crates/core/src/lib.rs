//! Setpoint-tracking benchmark for a non-minimum-phase plant: an LQI baseline,
//! two DDPG controllers, and a twelve-criterion scoring framework.

// `!(x > 0.0)` is used deliberately so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod criteria;
pub mod ddpg;
pub mod error;
pub mod harness;
pub mod lqi;
pub mod ltisys;
pub mod neural;

pub use error::{Error, Result};
