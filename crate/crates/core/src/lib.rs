//! End-to-end prognosis pipeline for hemorrhage CT slices: preprocessing,
//! a GCS-score-plus-image fusion classifier with self-attention, training,
//! patient-level voted evaluation, and saliency maps — all on a small
//! verified autodiff core.

pub mod cli;
pub mod cohort;
pub mod ctprep;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod explain;
pub mod fusionnet;
pub mod numcore;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
