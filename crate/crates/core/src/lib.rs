//! Density-crop guided semi-supervised object detection at desk scale.
//!
//! The crate clusters small objects into density crops, trains a
//! mean-teacher detector that zooms into those crops on labeled and
//! pseudo-labeled images, runs two-stage crop-fusion inference and scores
//! the results with COCO-style AP and error profiles.

pub mod cli;
pub mod config;
pub mod croplab;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod infer;
pub mod manifest;
pub mod metrics;
pub mod seed;
pub mod teacher;
