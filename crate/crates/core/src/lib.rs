//! Whole-slide classification toolkit: corpus manifests and splits, sliding
//! window patch extraction with background rejection, a residual patch
//! classifier trained from scratch, and slide-level aggregation with a
//! threshold grid search.

pub mod aggregate;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod patch;
pub mod resnet;
pub mod synthetic;

pub use error::{Error, Result};
