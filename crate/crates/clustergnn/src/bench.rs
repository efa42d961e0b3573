//! Dense-vs-clustered attention scaling benchmark: wall time, instrumented
//! attention-buffer bytes, and score-pair counts across input sizes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{assign, kmeans_init, ClusterState};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::BenchRow;
use crate::kernels::bufstats;
use crate::matrix::{Matrix, Scalar};
use crate::model::derive_seed;
use crate::sparse::{attention_cost, cluster_mask, cluster_stage_graph, stage_routing};
use crate::weights::{AttentionLayerWeights, Binder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    Clustered,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Dense => "dense",
            BenchMode::Clustered => "clustered",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(BenchMode::Dense),
            "clustered" => Ok(BenchMode::Clustered),
            other => Err(Error::config(format!("unknown bench mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub modes: Vec<BenchMode>,
    /// Cluster counts; one attention layer runs per schedule entry.
    pub schedule: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    /// Runs per (n, mode); the median wall time is reported.
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![512, 1024, 2048, 4096, 8192],
            modes: vec![BenchMode::Dense, BenchMode::Clustered],
            schedule: vec![16, 32, 64, 128],
            d: 32,
            heads: 4,
            reps: 5,
            threads: 1,
            seed: 1,
        }
    }
}

fn random_features<S: Scalar>(n: usize, d: usize, seed: u64) -> Matrix<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, d, |_, _| S::from64(rng.gen_range(-1.0..1.0)))
}

struct BenchSetup {
    layers: Vec<AttentionLayerWeights<f32>>,
    clusters: Vec<Vec<ClusterState<f32>>>,
}

/// One attention layer per schedule stage, with per-stage-per-head centers
/// seeded by k-means on that stage's routing features (untimed, mirroring
/// centers trained offline).
fn prepare(cfg: &BenchConfig, features: &Matrix<f32>) -> Result<BenchSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "bench.weights"));
    let layers: Vec<AttentionLayerWeights<f32>> = cfg
        .schedule
        .iter()
        .map(|_| AttentionLayerWeights::init(&mut rng, cfg.d, cfg.heads))
        .collect();

    let mut clusters = Vec::with_capacity(cfg.schedule.len());
    let mut g = Graph::new(false);
    let mut cur = g.leaf(features.clone());
    for (s, (&k, layer)) in cfg.schedule.iter().zip(&layers).enumerate() {
        let mut binder = Binder::default();
        let bound = layer.bind(&mut g, &mut binder, "bench");
        let qkr = stage_routing(&mut g, cur, &bound);
        let mut states = Vec::with_capacity(cfg.heads);
        for (h, (_, _, r)) in qkr.iter().enumerate() {
            let feats = g.value(*r);
            let k_eff = k.min(feats.rows());
            let mut state = kmeans_init(
                feats,
                k_eff,
                derive_seed(cfg.seed, &format!("bench.centers.{s}.{h}")),
                2,
            )?;
            state.stage_index = s;
            states.push(state);
        }
        let (next, _) = cluster_stage_graph(&mut g, cur, &states, &[bound], None)?;
        cur = next;
        clusters.push(states);
    }
    Ok(BenchSetup { layers, clusters })
}

fn run_stack(
    features: &Matrix<f32>,
    setup: &BenchSetup,
    mode: BenchMode,
    threads: usize,
) -> Result<(Matrix<f32>, u64)> {
    let mut g = Graph::new(false);
    g.threads = threads;
    let mut cur = g.leaf(features.clone());
    let n = features.rows();
    let mut unmasked: u64 = 0;
    for (s, layer) in setup.layers.iter().enumerate() {
        let mut binder = Binder::default();
        let bound = layer.bind(&mut g, &mut binder, "bench");
        match mode {
            BenchMode::Dense => {
                cur = crate::encoder::gnn_layer_graph(&mut g, cur, cur, &bound, None, 1)?;
                unmasked += (n as u64) * (n as u64);
            }
            BenchMode::Clustered => {
                let (next, trace) =
                    cluster_stage_graph(&mut g, cur, &setup.clusters[s], &[bound], None)?;
                cur = next;
                let per_head: u64 = trace
                    .routing
                    .iter()
                    .map(|(_, asg)| attention_cost(n, asg).0)
                    .sum();
                unmasked += per_head / trace.routing.len() as u64;
            }
        }
    }
    Ok((g.value(cur).clone(), unmasked))
}

/// Verifies the fast path against the dense-masked oracle on a 64-feature
/// layer before any timing is trusted.
pub fn self_check(cfg: &BenchConfig) -> Result<f64> {
    let n = 64;
    let features: Matrix<f32> = random_features(n, cfg.d, derive_seed(cfg.seed, "bench.selfcheck"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "bench.selfcheck.w"));
    let layer = AttentionLayerWeights::<f32>::init(&mut rng, cfg.d, cfg.heads);

    // Shared assignment across heads so the single-mask oracle applies.
    let routing = {
        let mut g = Graph::new(false);
        let mut binder = Binder::default();
        let bound = layer.bind(&mut g, &mut binder, "check");
        let f = g.leaf(features.clone());
        let qkr = stage_routing(&mut g, f, &bound);
        g.value(qkr[0].2).clone()
    };
    let state = kmeans_init(&routing, 4, derive_seed(cfg.seed, "bench.selfcheck.km"), 2)?;
    let asg = assign(&routing, &state);
    let fast = crate::sparse::clustered_attention(&features, &[asg.clone()], &layer)?;
    let oracle = crate::sparse::masked_dense_oracle(&features, &cluster_mask(&asg), &layer)?;
    let deviation = fast.max_abs_diff(&oracle);
    if deviation > 1e-5 {
        return Err(Error::Degenerate(format!(
            "bench self-check failed: clustered attention deviates from oracle by {deviation:e}"
        )));
    }
    Ok(deviation)
}

/// Full sweep. For each size, both modes run on identical features with
/// identical weights; wall time is the median of `reps` runs and peak bytes
/// come from the instrumented attention-buffer accounting.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    self_check(cfg)?;
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let features: Matrix<f32> =
            random_features(n, cfg.d, derive_seed(cfg.seed, &format!("bench.features.{n}")));
        let setup = prepare(cfg, &features)?;
        for &mode in &cfg.modes {
            let session = bufstats::session();
            let (_, unmasked) = run_stack(&features, &setup, mode, cfg.threads)?;
            let bytes = session.peak_bytes();
            drop(session);

            let mut times = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let start = Instant::now();
                let (out, _) = run_stack(&features, &setup, mode, cfg.threads)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(out.at(0, 0));
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let ms = times[times.len() / 2];

            let layers = setup.layers.len() as u64;
            let row = BenchRow {
                n,
                mode: mode.name().to_string(),
                ms,
                bytes,
                unmasked_pairs: unmasked,
                dense_pairs: layers * (n as u64) * (n as u64),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Least-squares slope of `log(y)` against `log(x)`; the scaling exponent.
pub fn fit_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BenchConfig {
        BenchConfig {
            sizes: vec![64, 128],
            schedule: vec![4, 8],
            d: 16,
            heads: 2,
            reps: 1,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn self_check_passes() {
        let dev = self_check(&tiny_cfg()).unwrap();
        assert!(dev <= 1e-5);
    }

    #[test]
    fn bench_rows_have_expected_counts() {
        let cfg = tiny_cfg();
        let rows = run_bench(&cfg, |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            assert!(row.ms >= 0.0);
            assert!(row.bytes > 0);
            let layers = cfg.schedule.len() as u64;
            assert_eq!(row.dense_pairs, layers * (row.n as u64) * (row.n as u64));
            if row.mode == "dense" {
                assert_eq!(row.unmasked_pairs, row.dense_pairs);
            } else {
                assert!(row.unmasked_pairs < row.dense_pairs);
            }
        }
        // clustered buffers strictly smaller than dense at the same n
        for n in [64usize, 128] {
            let dense = rows.iter().find(|r| r.n == n && r.mode == "dense").unwrap();
            let clustered = rows.iter().find(|r| r.n == n && r.mode == "clustered").unwrap();
            assert!(clustered.bytes < dense.bytes, "n={n}");
        }
    }

    #[test]
    fn balanced_schedule_matches_size_formula() {
        // 1024 features in perfectly balanced clusters: the unmasked count per
        // stage is k * (n/k)^2 = n^2 / k.
        let n = 1024usize;
        for k in [16usize, 32] {
            let cid: Vec<usize> = (0..n).map(|i| i % k).collect();
            let asg = crate::cluster::Assignment::new(cid, k);
            let (unmasked, dense) = attention_cost(n, &asg);
            assert_eq!(unmasked, (n as u64) * (n as u64) / k as u64);
            assert_eq!(dense, (n as u64) * (n as u64));
        }
    }

    #[test]
    fn exponent_fit_recovers_quadratic() {
        let pts: Vec<(f64, f64)> = [256.0f64, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&x| (x, 3.0e-6 * x * x))
            .collect();
        let e = fit_exponent(&pts);
        assert!((e - 2.0).abs() < 1e-9);
    }
}
