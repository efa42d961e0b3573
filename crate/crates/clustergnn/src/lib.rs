//! Cluster-routed sparse attention for keypoint feature matching.
//!
//! The pipeline encodes keypoints with an attentional GNN over complete
//! intra/inter graphs, routes the union of both images' features through
//! learned hierarchical clusters, applies cluster-masked sparse attention,
//! and scores correspondences with a dual-softmax matching head. Training,
//! synthetic data generation, binary model/keypoint formats, and an
//! attention-scaling benchmark live alongside the model.

pub mod bench;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod keypoints;
pub mod loss;
pub mod matcher;
pub mod matrix;
pub mod model;
pub mod sparse;
pub mod synth;
pub mod train;
pub mod weights;

pub use cli::run_cli;
pub use error::{Error, Result};
pub use matrix::{log_softmax, softmax_rows, Axis, Mask, Matrix, Scalar};
