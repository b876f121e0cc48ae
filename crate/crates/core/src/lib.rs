//! Weakly-supervised cloud detection pipeline.
//!
//! A fixed-point image translation GAN is trained from image-level labels
//! only; pixel-level cloud masks fall out of thresholding the difference
//! between an image and its clear translation, and a pseudo-label-trained
//! segmentation network refines them (optionally fine-tuned with a small
//! fraction of real pixel labels). CAM-style baselines, pixel metrics, and
//! file-based stage orchestration round out the pipeline.

pub mod cam;
pub mod config;
pub mod data;
pub mod eval;
pub mod gan;
pub mod io;
pub mod mask;
pub mod pipeline;
pub mod refine;
pub mod synth;
