//! Promptable monocular 3D object detection on desk-scale scenes.
//!
//! A single RGB image plus per-object 2D prompts (boxes or points) go in;
//! oriented 3D boxes in camera coordinates come out. An optional camera
//! intrinsics prompt grounds the metric scale; without it the model falls
//! back to its own intrinsics estimate. Everything runs on the CPU in f64
//! with a hand-rolled reverse-mode tape, so training and inference are
//! bit-reproducible given a seed.
//!
//! Module map:
//! - [`graph`]: reverse-mode autodiff over dense f64 matrices
//! - [`nn`]: parameter store and transformer building blocks
//! - [`geometry`]: intrinsics, rays, oriented boxes, exact and Monte Carlo IoU
//! - [`encoders`]: the two toy ViT image encoders and the conv stem
//! - [`aggregator`]: gated fusion of the encoder pyramids
//! - [`camdepth`]: intrinsics head, ray embedding, camera-aware depth
//! - [`interpreter`]: prompt tokens, two-way decoder, box heads
//! - [`model`]: full detector wiring the above together
//! - [`losses`]: depth, camera, and box losses with analytic gradients
//! - [`datakit`]: synthetic scene generation, manifests, prompt sampling
//! - [`evalkit`]: IoU-thresholded matching and average precision
//! - [`train`]: AdamW loop with cosine schedule
//! - [`checkpoint`]: versioned binary weight snapshots

pub mod aggregator;
pub mod camdepth;
pub mod checkpoint;
pub mod config;
pub mod datakit;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod geometry;
pub mod graph;
pub mod interpreter;
pub mod losses;
pub mod model;
pub mod nn;
pub mod seeding;
pub mod train;

pub use error::Error;

/// Dense row-major f64 matrix, the common currency of the whole crate.
pub type Mat = ndarray::Array2<f64>;
