//! Two-stage pedestrian detector with segmentation self-attention, trained
//! from scratch on the CPU.
//!
//! Stage 1 ([`rpn`]) proposes boxes from anchors; stage 2 ([`rcnn`]) rescores
//! padded crops of those proposals. Both stages attach weakly supervised
//! segmentation branches whose foreground maps are fed back as extra channels.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod rcnn;
pub mod rpn;
pub mod synth;
pub mod tensor;
pub mod weakseg;

pub use error::{Error, Result};
