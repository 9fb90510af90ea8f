//! Weakly-supervised defect segmentation from bounding boxes.
//!
//! The crate covers the whole box-to-pixel pipeline:
//!
//! - [`annotations`]: YOLO box files, the dataset manifest and splits.
//! - [`teacher`] and [`pseudo_labels`]: per-box teacher masks, rasterization
//!   into multi-class label maps and the offline PNG cache.
//! - [`model`]: the hierarchical student (frozen ViT global branch with
//!   bias/norm adaptation, residual top-down fusion, stride-2 detail branch,
//!   feature mixer, binary and fine heads).
//! - [`objectives`]: asymmetric Dice, one-sided self-correction,
//!   class-weighted cross-entropy and the combined loss.
//! - [`trainer`]: AdamW with cosine schedule, gradient clipping, EMA weights,
//!   checkpointing and prediction.
//! - [`metrics`]: confusion-matrix evaluation (mIoU, anomaly mIoU, binary
//!   IoU/recall, anomaly F1, per-class IoU).
//! - [`synthetic`]: a desk-scale defect scene generator with a controllable
//!   noisy teacher, used to study self-correction without external data.
//! - [`cli`]: the `boxdistill` command-line entry points.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod annotations;
pub mod cli;
pub mod config;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod objectives;
pub mod pseudo_labels;
pub mod synthetic;
pub mod teacher;
pub mod trainer;

mod util;

pub use error::{Error, Result};
