//! Matching head: confidence matrix, learnable dustbin, dual-softmax scores,
//! the Sinkhorn ablation, and mutual-argmax match extraction.

use crate::error::{Error, Result};
use crate::matrix::{log_softmax, Axis, Matrix, Scalar};

/// `(n+1) × (m+1)` log-score matrix; the last row and column are the dustbin
/// channels absorbing unmatched keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchProbabilities<S = f32> {
    pub p: Matrix<S>,
}

impl<S: Scalar> MatchProbabilities<S> {
    pub fn new(p: Matrix<S>) -> Self {
        assert!(p.rows() >= 1 && p.cols() >= 1, "needs dustbin row and column");
        MatchProbabilities { p }
    }

    /// Keypoint count in image a (dustbin row excluded).
    pub fn n(&self) -> usize {
        self.p.rows() - 1
    }

    /// Keypoint count in image b (dustbin column excluded).
    pub fn m(&self) -> usize {
        self.p.cols() - 1
    }
}

/// Match set with per-pair scores; indices not in any pair are unmatched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize, f32)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl MatchResult {
    pub fn matched_a(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(i, _, _)| i)
    }

    pub fn matched_b(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(_, j, _)| j)
    }
}

/// Plain dot-product confidence: `C_ij = f_a(i) · f_b(j)`.
pub fn confidence<S: Scalar>(f_a_out: &Matrix<S>, f_b_out: &Matrix<S>) -> Matrix<S> {
    assert_eq!(f_a_out.cols(), f_b_out.cols(), "confidence: feature dims differ");
    f_a_out.matmul_nt(f_b_out)
}

/// Appends a dustbin row and column filled with the learnable scalar `z`.
pub fn add_dustbin<S: Scalar>(c: &Matrix<S>, z: S) -> Matrix<S> {
    let (n, m) = c.shape();
    let mut out = Matrix::filled(n + 1, m + 1, z);
    for i in 0..n {
        out.row_mut(i)[..m].copy_from_slice(c.row(i));
    }
    out
}

/// Element-wise sum of the row-wise and column-wise log-softmax of the
/// dustbin-augmented confidence matrix.
pub fn dual_softmax<S: Scalar>(c_tilde: &Matrix<S>) -> Result<MatchProbabilities<S>> {
    let rows = log_softmax(c_tilde, Axis::Rows)?;
    let cols = log_softmax(c_tilde, Axis::Cols)?;
    Ok(MatchProbabilities::new(rows.add(&cols)))
}

/// Log-domain Sinkhorn normalization of the dustbin-augmented confidence
/// matrix. Marginals default to `[1,…,1, m]` over rows and `[1,…,1, n]` over
/// columns so the dustbin absorbs the slack. Returns the log-assignment.
pub fn sinkhorn<S: Scalar>(
    c_tilde: &Matrix<S>,
    iters: usize,
    marginals: Option<(&[f64], &[f64])>,
) -> Result<MatchProbabilities<S>> {
    if iters == 0 {
        return Err(Error::Degenerate("sinkhorn requires at least one iteration".into()));
    }
    let (rows, cols) = c_tilde.shape();
    if rows < 2 || cols < 2 {
        return Err(Error::Degenerate("sinkhorn needs at least one keypoint per image".into()));
    }
    let (n, m) = (rows - 1, cols - 1);
    let (log_mu, log_nu) = match marginals {
        Some((mu, nu)) => {
            if mu.len() != rows || nu.len() != cols {
                return Err(Error::Shape {
                    op: "sinkhorn",
                    expected: format!("marginals of length {rows} and {cols}"),
                    got: format!("{} and {}", mu.len(), nu.len()),
                });
            }
            if mu.iter().chain(nu).any(|&x| x <= 0.0) {
                return Err(Error::Degenerate("sinkhorn marginals must be positive".into()));
            }
            (
                mu.iter().map(|x| x.ln()).collect::<Vec<f64>>(),
                nu.iter().map(|x| x.ln()).collect::<Vec<f64>>(),
            )
        }
        None => {
            let mut mu = vec![0.0; rows];
            mu[n] = (m as f64).ln();
            let mut nu = vec![0.0; cols];
            nu[m] = (n as f64).ln();
            (mu, nu)
        }
    };

    let z: Vec<f64> = c_tilde.data().iter().map(|&x| x.into64()).collect();
    let mut u = vec![0f64; rows];
    let mut v = vec![0f64; cols];
    for it in 0..iters {
        for i in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                mx = mx.max(z[i * cols + j] + v[j]);
            }
            let s: f64 = (0..cols).map(|j| (z[i * cols + j] + v[j] - mx).exp()).sum();
            u[i] = log_mu[i] - (mx + s.ln());
        }
        for j in 0..cols {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..rows {
                mx = mx.max(z[i * cols + j] + u[i]);
            }
            let s: f64 = (0..rows).map(|i| (z[i * cols + j] + u[i] - mx).exp()).sum();
            v[j] = log_nu[j] - (mx + s.ln());
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "sinkhorn potentials",
                ctx: Some(format!("iteration {it}")),
            });
        }
    }
    let p = Matrix::from_fn(rows, cols, |i, j| S::from64(z[i * cols + j] + u[i] + v[j]));
    Ok(MatchProbabilities::new(p))
}

/// Mutual-argmax match extraction with a score threshold on `exp(P_ij)`.
/// The dustbin row/column participate in the argmax comparisons, so a point
/// preferring the dustbin stays unmatched.
pub fn extract_matches<S: Scalar>(p: &MatchProbabilities<S>, threshold: f64) -> MatchResult {
    let (n, m) = (p.n(), p.m());
    let mat = &p.p;
    let row_argmax: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..=m {
                if mat.at(i, j) > mat.at(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect();
    let col_argmax: Vec<usize> = (0..m)
        .map(|j| {
            let mut best = 0;
            for i in 1..=n {
                if mat.at(i, j) > mat.at(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect();
    let mut result = MatchResult::default();
    let mut matched_b = vec![false; m];
    for i in 0..n {
        let j = row_argmax[i];
        if j < m && col_argmax[j] == i {
            let score = mat.at(i, j).into64().exp();
            if score >= threshold {
                result.pairs.push((i, j, score as f32));
                matched_b[j] = true;
                continue;
            }
        }
        result.unmatched_a.push(i);
    }
    result.unmatched_b = (0..m).filter(|&j| !matched_b[j]).collect();
    result
}
