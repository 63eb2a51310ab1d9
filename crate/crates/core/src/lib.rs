//! Single-label to multi-label domain adaptation.
//!
//! A domain-wise branch aligns source and target features by classifier
//! discrepancy and proposes top-n pseudo labels for target images. A
//! label-wise branch learns label co-occurrence with a GCN and corrects those
//! pseudo labels. Both branches train in alternation until the pseudo labels
//! stop changing.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod dwc;
pub mod error;
pub mod losses;
pub mod lwc;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod trainer;

pub use error::{Result, ScidaError};
