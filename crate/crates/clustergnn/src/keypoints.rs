//! Keypoint sets: coordinates, confidence scores, and descriptors.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

/// Detected keypoints of one image. Descriptors come from an upstream
/// extractor; this crate only consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    /// Pixel coordinates, one `[x, y]` per keypoint.
    pub coords: Vec<[f32; 2]>,
    /// Detection confidences in `[0, 1]`.
    pub scores: Vec<f32>,
    /// `n × d` descriptor matrix.
    pub descriptors: Matrix<f32>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn validate(&self, image: (u32, u32)) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::Degenerate("keypoint set is empty".into()));
        }
        if self.scores.len() != n || self.descriptors.rows() != n {
            return Err(Error::Shape {
                op: "KeypointSet",
                expected: format!("{n} scores and descriptor rows"),
                got: format!("{} scores, {} rows", self.scores.len(), self.descriptors.rows()),
            });
        }
        let (w, h) = (image.0 as f32, image.1 as f32);
        for (i, c) in self.coords.iter().enumerate() {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::NonFinite { what: "keypoint coords", ctx: Some(format!("index {i}")) });
            }
            if c[0] < 0.0 || c[0] >= w || c[1] < 0.0 || c[1] >= h {
                return Err(Error::Degenerate(format!(
                    "keypoint {i} at ({}, {}) outside {w}x{h} image",
                    c[0], c[1]
                )));
            }
        }
        if !self.descriptors.all_finite() {
            return Err(Error::NonFinite { what: "descriptors", ctx: None });
        }
        Ok(())
    }

    /// Keypoint encoder inputs: coordinates normalized to `[-1, 1]` per axis
    /// (image center maps to the origin) concatenated with the score.
    pub fn encoder_inputs<S: Scalar>(&self, image: (u32, u32)) -> Matrix<S> {
        let (w, h) = (image.0 as f64, image.1 as f64);
        Matrix::from_fn(self.len(), 3, |i, j| {
            S::from64(match j {
                0 => 2.0 * self.coords[i][0] as f64 / w - 1.0,
                1 => 2.0 * self.coords[i][1] as f64 / h - 1.0,
                _ => self.scores[i] as f64,
            })
        })
    }
}
