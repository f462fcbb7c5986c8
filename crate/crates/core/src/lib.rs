//! Segment-level robustness toolkit: perturbation, segment alignment,
//! drift/stability regularisers, attention diagnostics and evaluation.

pub mod alignment;
pub mod attn_diag;
pub mod commands;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod perturb;
pub mod report;
pub mod segmenter;
pub mod synthetic;
pub mod toymodel;
pub mod trainer;

pub use error::{Error, Result};
