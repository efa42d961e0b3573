//! Learnable hierarchical clustering over the union of query and key vectors:
//! k-means seeding, cosine-discrepancy assignment, EMA center updates, and the
//! coarse-to-fine stage schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::matrix::{dot64, Matrix, Scalar};

/// Cluster centers of one stage (and one attention head). Centers are updated
/// by EMA during training and frozen at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState<S> {
    /// `k × d_qk` center vectors; never the zero vector.
    pub centers: Matrix<S>,
    /// Which stage of the schedule these centers belong to.
    pub stage_index: usize,
    /// EMA weight balancing old and new center values.
    pub beta: f64,
}

impl<S: Scalar> ClusterState<S> {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    /// Random unit-norm centers; placeholder until k-means seeding runs.
    pub fn random(k: usize, dim: usize, stage_index: usize, beta: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Matrix::from_fn(k, dim, |_, _| S::from64(rng.gen_range(-1.0..1.0)));
        for i in 0..k {
            normalize_row(centers.row_mut(i));
        }
        ClusterState { centers, stage_index, beta }
    }
}

fn normalize_row<S: Scalar>(row: &mut [S]) {
    let norm = dot64(row, row).sqrt();
    if norm > 0.0 {
        for x in row.iter_mut() {
            *x = S::from64(x.into64() / norm);
        }
    }
}

/// Per-feature cluster membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// Cluster index per feature, in `[0, k)`.
    pub cid: Vec<usize>,
    /// Member count per cluster; sums to the feature count.
    pub sizes: Vec<usize>,
}

impl Assignment {
    pub fn new(cid: Vec<usize>, k: usize) -> Self {
        let mut sizes = vec![0usize; k];
        for &c in &cid {
            assert!(c < k, "cluster id {c} out of range {k}");
            sizes[c] += 1;
        }
        Assignment { cid, sizes }
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.cid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cid.is_empty()
    }

    /// Member indices per cluster, each list ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &c) in self.cid.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

/// Cosine discrepancy `1 − cos(c, f)`, in `[0, 2]`.
pub fn discrepancy<S: Scalar>(c: &[S], f: &[S]) -> Result<f64> {
    let nc = dot64(c, c).sqrt();
    let nf = dot64(f, f).sqrt();
    if nc == 0.0 || nf == 0.0 {
        return Err(Error::ZeroNorm("discrepancy"));
    }
    Ok(1.0 - dot64(c, f) / (nc * nf))
}

/// Argmin-discrepancy assignment; ties break toward the lowest center index.
/// A zero-norm feature cannot be compared under the cosine metric, so it goes
/// to cluster 0 with a logged warning.
pub fn assign<S: Scalar>(features: &Matrix<S>, state: &ClusterState<S>) -> Assignment {
    assert_eq!(
        features.cols(),
        state.centers.cols(),
        "feature dim must match center dim"
    );
    let k = state.k();
    let mut center_norms = Vec::with_capacity(k);
    for c in 0..k {
        let row = state.centers.row(c);
        center_norms.push(dot64(row, row).sqrt());
    }
    let mut cid = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let f = features.row(i);
        let nf = dot64(f, f).sqrt();
        if nf == 0.0 {
            log::warn!("zero-norm feature {i} assigned to cluster 0");
            cid.push(0);
            continue;
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = 1.0 - dot64(state.centers.row(c), f) / (center_norms[c] * nf);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        cid.push(best);
    }
    Assignment::new(cid, k)
}

/// k-means++ seeding followed by `iters` spherical Lloyd steps under the
/// cosine discrepancy; deterministic for a given seed.
pub fn kmeans_init<S: Scalar>(
    features: &Matrix<S>,
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<ClusterState<S>> {
    let n = features.rows();
    if n < k {
        return Err(Error::Degenerate(format!(
            "k-means needs at least {k} features, got {n}"
        )));
    }
    if k == 0 {
        return Err(Error::Degenerate("k-means needs k >= 1".into()));
    }
    // Work on normalized copies; the metric is scale-free.
    let mut unit = features.cast::<S>();
    for i in 0..n {
        normalize_row(unit.row_mut(i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding with D^2 weighting.
    let mut chosen: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut min_d = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = *chosen.last().unwrap();
        for i in 0..n {
            let d = 1.0 - dot64(unit.row(i), unit.row(last));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        let total: f64 = min_d.iter().map(|d| d * d).sum();
        let next = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in min_d.iter().enumerate() {
                t -= d * d;
                if t <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining mass is on already-chosen points; take the first
            // index not yet used so k = n still yields k distinct centers.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    let mut centers = unit.gather_rows(&chosen);

    let mut state = ClusterState { centers: centers.clone(), stage_index: 0, beta: 0.99 };
    for _ in 0..iters {
        state.centers = centers.clone();
        let asg = assign(&unit, &state);
        let mut acc = vec![0f64; k * features.cols()];
        for (i, &c) in asg.cid.iter().enumerate() {
            let row = unit.row(i);
            let dst = &mut acc[c * features.cols()..(c + 1) * features.cols()];
            for (a, &x) in dst.iter_mut().zip(row) {
                *a += x.into64();
            }
        }
        for c in 0..k {
            let dst = &acc[c * features.cols()..(c + 1) * features.cols()];
            let norm = dst.iter().map(|x| x * x).sum::<f64>().sqrt();
            if asg.sizes[c] == 0 || norm == 0.0 {
                // Empty cluster: reseed to the member farthest from its center.
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = 1.0 - dot64(unit.row(i), centers.row(asg.cid[i]));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centers.row_mut(c).copy_from_slice(unit.row(far));
            } else {
                for (dstv, &a) in centers.row_mut(c).iter_mut().zip(dst) {
                    *dstv = S::from64(a / norm);
                }
            }
        }
    }
    state.centers = centers;
    Ok(state)
}

/// EMA center update: `c ← β·c + (1−β)·mean(assigned features)`.
/// Empty clusters keep their old center.
pub fn ema_update<S: Scalar>(
    state: &ClusterState<S>,
    features: &Matrix<S>,
    asg: &Assignment,
) -> ClusterState<S> {
    assert_eq!(asg.len(), features.rows(), "assignment covers all features");
    assert_eq!(asg.k(), state.k(), "assignment cluster count matches state");
    let dim = state.centers.cols();
    let beta = state.beta;
    let mut acc = vec![0f64; state.k() * dim];
    for (i, &c) in asg.cid.iter().enumerate() {
        let dst = &mut acc[c * dim..(c + 1) * dim];
        for (a, &x) in dst.iter_mut().zip(features.row(i)) {
            *a += x.into64();
        }
    }
    let mut centers = state.centers.clone();
    for c in 0..state.k() {
        if asg.sizes[c] == 0 {
            continue;
        }
        let mean = &acc[c * dim..(c + 1) * dim];
        let row = centers.row_mut(c);
        for (j, x) in row.iter_mut().enumerate() {
            let m = mean[j] / asg.sizes[c] as f64;
            *x = S::from64(beta * x.into64() + (1.0 - beta) * m);
        }
    }
    ClusterState { centers, stage_index: state.stage_index, beta }
}

/// Validated cluster-count schedule from the config.
pub fn stage_schedule(config: &ModelConfig) -> Result<Vec<usize>> {
    config.validate()?;
    Ok(config.stage_schedule.clone())
}

/// Schedule with each stage clamped to the available feature count.
pub fn effective_schedule(schedule: &[usize], n_total: usize) -> Vec<usize> {
    schedule.iter().map(|&k| k.min(n_total)).collect()
}

/// Total within-cluster discrepancy of an assignment; k-means' objective.
pub fn total_discrepancy<S: Scalar>(
    features: &Matrix<S>,
    state: &ClusterState<S>,
    asg: &Assignment,
) -> f64 {
    let mut total = 0.0;
    for (i, &c) in asg.cid.iter().enumerate() {
        total += discrepancy(state.centers.row(c), features.row(i)).unwrap_or(0.0);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn discrepancy_parallel_orthogonal_antiparallel() {
        assert_eq!(discrepancy(&[1.0f32, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(discrepancy(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(discrepancy(&[1.0f32, 0.0], &[-2.0, 0.0]).unwrap(), 2.0);
        assert!(discrepancy(&[0.0f32, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn assign_identity_on_centers() {
        let centers = Matrix::<f32>::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
        let state = ClusterState { centers: centers.clone(), stage_index: 0, beta: 0.99 };
        let asg = assign(&centers, &state);
        assert_eq!(asg.cid, vec![0, 1, 2]);
        assert_eq!(asg.sizes, vec![1, 1, 1]);
    }

    #[test]
    fn assign_scale_invariant() {
        let mut r = rng(1);
        let centers = Matrix::<f32>::from_fn(4, 3, |_, _| r.gen_range(-1.0..1.0));
        let state = ClusterState { centers, stage_index: 0, beta: 0.99 };
        let f = Matrix::<f32>::from_fn(10, 3, |_, _| r.gen_range(-1.0..1.0));
        let scaled = f.scale(7.5);
        assert_eq!(assign(&f, &state).cid, assign(&scaled, &state).cid);
    }

    #[test]
    fn assign_matches_bruteforce_argmin() {
        let mut r = rng(2);
        let centers = Matrix::<f32>::from_fn(4, 5, |_, _| r.gen_range(-1.0..1.0));
        let state = ClusterState { centers: centers.clone(), stage_index: 0, beta: 0.99 };
        let f = Matrix::<f32>::from_fn(20, 5, |_, _| r.gen_range(-1.0..1.0));
        let asg = assign(&f, &state);
        for i in 0..20 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..4 {
                let d = discrepancy(centers.row(c), f.row(i)).unwrap();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(asg.cid[i], best, "feature {i}");
        }
    }

    #[test]
    fn assign_zero_norm_goes_to_cluster_zero() {
        let centers = Matrix::<f32>::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let state = ClusterState { centers, stage_index: 0, beta: 0.99 };
        let f = Matrix::<f32>::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.1]);
        let asg = assign(&f, &state);
        assert_eq!(asg.cid[0], 0);
        assert_eq!(asg.cid[1], 1);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let mut r = rng(3);
        let f = Matrix::<f32>::from_fn(6, 4, |_, _| r.gen_range(-1.0..1.0));
        let state = kmeans_init(&f, 6, 7, 5).unwrap();
        let asg = assign(&f, &state);
        assert_eq!(asg.sizes, vec![1; 6]);
        assert!(total_discrepancy(&f, &state, &asg) < 1e-9);
    }

    #[test]
    fn kmeans_separates_antipodal_bundles() {
        // Two bundles around +u and -u; cosine separates them perfectly.
        let mut r = rng(4);
        let mut rows = Vec::new();
        for i in 0..20 {
            let sign = if i < 10 { 1.0f32 } else { -1.0 };
            rows.push(vec![
                sign * 5.0 + r.gen_range(-0.2..0.2),
                sign * 1.0 + r.gen_range(-0.2..0.2),
                r.gen_range(-0.2..0.2),
            ]);
        }
        let f = Matrix::from_rows(&rows);
        let state = kmeans_init(&f, 2, 11, 10).unwrap();
        let asg = assign(&f, &state);
        let first = asg.cid[0];
        assert!(asg.cid[..10].iter().all(|&c| c == first));
        assert!(asg.cid[10..].iter().all(|&c| c == 1 - first));
    }

    #[test]
    fn kmeans_deterministic() {
        let mut r = rng(5);
        let f = Matrix::<f32>::from_fn(30, 4, |_, _| r.gen_range(-1.0..1.0));
        let a = kmeans_init(&f, 4, 99, 10).unwrap();
        let b = kmeans_init(&f, 4, 99, 10).unwrap();
        assert_eq!(a.centers, b.centers);
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let mut r = rng(6);
        let f = Matrix::<f32>::from_fn(40, 6, |_, _| r.gen_range(-1.0..1.0));
        let mut prev = f64::INFINITY;
        for iters in 0..6 {
            let state = kmeans_init(&f, 5, 42, iters).unwrap();
            let asg = assign(&f, &state);
            let obj = total_discrepancy(&f, &state, &asg);
            assert!(obj <= prev + 1e-9, "iters {iters}: {obj} > {prev}");
            prev = obj;
        }
    }

    #[test]
    fn kmeans_too_few_features_errors() {
        let f = Matrix::<f32>::zeros(3, 4);
        assert!(kmeans_init(&f, 4, 0, 1).is_err());
    }

    #[test]
    fn ema_beta_one_keeps_centers() {
        let mut r = rng(7);
        let centers = Matrix::<f32>::from_fn(3, 4, |_, _| r.gen_range(-1.0..1.0));
        let state = ClusterState { centers: centers.clone(), stage_index: 1, beta: 1.0 };
        let f = Matrix::<f32>::from_fn(9, 4, |_, _| r.gen_range(-1.0..1.0));
        let asg = assign(&f, &state);
        let new = ema_update(&state, &f, &asg);
        assert_eq!(new.centers, centers);
    }

    #[test]
    fn ema_beta_zero_single_member_copies_member() {
        let centers = Matrix::<f32>::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let state = ClusterState { centers, stage_index: 0, beta: 0.0 };
        let f = Matrix::<f32>::from_vec(2, 2, vec![0.9, 0.1, -0.2, 2.0]);
        let asg = Assignment::new(vec![0, 1], 2);
        let new = ema_update(&state, &f, &asg);
        assert_eq!(new.centers.row(0), f.row(0));
        assert_eq!(new.centers.row(1), f.row(1));
    }

    #[test]
    fn ema_mean_arithmetic() {
        let centers = Matrix::<f32>::from_vec(1, 2, vec![1.0, -1.0]);
        let state = ClusterState { centers, stage_index: 0, beta: 0.99 };
        let f = Matrix::<f32>::from_vec(2, 2, vec![3.0, 1.0, 5.0, 3.0]);
        let asg = Assignment::new(vec![0, 0], 1);
        let new = ema_update(&state, &f, &asg);
        // mean = (4, 2); expected 0.99*c + 0.01*mean, coordinate-wise in f64
        let e0 = 0.99f64 * 1.0 + 0.01 * 4.0;
        let e1 = 0.99f64 * -1.0 + 0.01 * 2.0;
        assert!((new.centers.at(0, 0) as f64 - e0).abs() < 1e-7);
        assert!((new.centers.at(0, 1) as f64 - e1).abs() < 1e-7);
    }

    #[test]
    fn ema_empty_cluster_frozen_and_moves_toward_mean() {
        let mut r = rng(8);
        let centers = Matrix::<f32>::from_fn(3, 4, |_, _| r.gen_range(-1.0..1.0));
        let state = ClusterState { centers: centers.clone(), stage_index: 0, beta: 0.99 };
        let f = Matrix::<f32>::from_fn(8, 4, |_, _| r.gen_range(-1.0..1.0));
        let cid = vec![0, 0, 1, 1, 0, 1, 0, 1]; // cluster 2 empty
        let asg = Assignment::new(cid, 3);
        let new = ema_update(&state, &f, &asg);
        assert_eq!(new.centers.row(2), centers.row(2));
        for c in 0..2 {
            let members: Vec<usize> = (0..8).filter(|&i| asg.cid[i] == c).collect();
            let mut mean = vec![0f64; 4];
            for &i in &members {
                for (m, &x) in mean.iter_mut().zip(f.row(i)) {
                    *m += x as f64 / members.len() as f64;
                }
            }
            let dist = |row: &[f32]| -> f64 {
                row.iter()
                    .zip(&mean)
                    .map(|(&a, &b)| (a as f64 - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            assert!(dist(new.centers.row(c)) < dist(centers.row(c)));
        }
    }

    #[test]
    fn schedule_default_and_clamp() {
        let cfg = ModelConfig::default();
        assert_eq!(stage_schedule(&cfg).unwrap(), vec![16, 32, 64, 128]);
        assert_eq!(
            effective_schedule(&[16, 32, 64, 128], 40),
            vec![16, 32, 40, 40]
        );
        let fixed = ModelConfig { stage_schedule: vec![64; 4], ..ModelConfig::default() };
        assert_eq!(stage_schedule(&fixed).unwrap(), vec![64, 64, 64, 64]);
        let bad = ModelConfig { stage_schedule: vec![32, 16], ..ModelConfig::default() };
        assert!(stage_schedule(&bad).is_err());
    }

    #[test]
    fn inference_assignments_are_stable() {
        let mut r = rng(9);
        let f = Matrix::<f32>::from_fn(25, 4, |_, _| r.gen_range(-1.0..1.0));
        let state = kmeans_init(&f, 4, 1, 5).unwrap();
        let a = assign(&f, &state);
        let b = assign(&f, &state);
        assert_eq!(a, b);
    }
}
