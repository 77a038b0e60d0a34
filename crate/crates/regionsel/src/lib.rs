//! Group-level region selection on voxel lattices under spatial uncertainty.
//!
//! A two-level Gaussian model ties subject effect maps to a group template through
//! per-subject displacement fields; regional means are switched on or off by a binary
//! network vector chosen through Bayes factors.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod deform;
pub mod error;
pub mod evidence;
pub mod model;
pub mod randthresh;
pub mod report;
pub mod samplers;
pub mod simulate;
pub mod volume;

pub use error::{Error, Result};
