//! Matching and clustering losses. Supervised sets are averaged (not
//! size-multiplied) so the loss scale is independent of keypoint count.

use crate::cluster::{Assignment, ClusterState};
use crate::error::{Error, Result};
use crate::matcher::MatchProbabilities;
use crate::matrix::{Matrix, Scalar};
use crate::synth::GroundTruth;

/// Mean negative log-score over the match set plus means over each dustbin
/// set. Errors when there is no supervision at all.
pub fn matching_loss<S: Scalar>(p: &MatchProbabilities<S>, gt: &GroundTruth) -> Result<f64> {
    let (n, m) = (p.n(), p.m());
    if gt.matches.is_empty() && gt.unmatched_a.is_empty() && gt.unmatched_b.is_empty() {
        return Err(Error::NoSupervision);
    }
    for &(i, j) in &gt.matches {
        if i >= n || j >= m {
            return Err(Error::Shape {
                op: "matching_loss",
                expected: format!("indices below ({n}, {m})"),
                got: format!("({i}, {j})"),
            });
        }
    }
    let mut loss = 0.0;
    if !gt.matches.is_empty() {
        let s: f64 = gt
            .matches
            .iter()
            .map(|&(i, j)| p.p.at(i, j).into64())
            .sum();
        loss -= s / gt.matches.len() as f64;
    }
    if !gt.unmatched_a.is_empty() {
        let s: f64 = gt.unmatched_a.iter().map(|&i| p.p.at(i, m).into64()).sum();
        loss -= s / gt.unmatched_a.len() as f64;
    }
    if !gt.unmatched_b.is_empty() {
        let s: f64 = gt.unmatched_b.iter().map(|&j| p.p.at(n, j).into64()).sum();
        loss -= s / gt.unmatched_b.len() as f64;
    }
    Ok(loss)
}

/// Mean Euclidean distance between each feature and its assigned center.
pub fn cluster_loss<S: Scalar>(
    state: &ClusterState<S>,
    features: &Matrix<S>,
    asg: &Assignment,
) -> f64 {
    assert_eq!(features.rows(), asg.len(), "assignment covers all features");
    if asg.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, &c) in asg.cid.iter().enumerate() {
        let d2: f64 = features
            .row(i)
            .iter()
            .zip(state.centers.row(c))
            .map(|(&a, &b)| (a.into64() - b.into64()).powi(2))
            .sum();
        total += d2.sqrt();
    }
    total / asg.len() as f64
}

/// `lm + gamma · Σ_t lc_t`.
pub fn total_loss(lm: f64, lc_per_stage: &[f64], gamma: f64) -> f64 {
    assert!(gamma >= 0.0, "gamma must be nonnegative");
    lm + gamma * lc_per_stage.iter().sum::<f64>()
}
