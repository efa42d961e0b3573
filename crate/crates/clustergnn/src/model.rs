//! Full matcher model: encoder → complete-graph initialization → hierarchical
//! cluster attention → dual-softmax head, with the training-loss graph and
//! frozen-routing variants used for gradient verification.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::cluster::{effective_schedule, kmeans_init, Assignment, ClusterState};
use crate::config::ModelConfig;
use crate::encoder::{encode_keypoints_graph, init_graphs_graph};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::keypoints::KeypointSet;
use crate::matcher::{extract_matches, sinkhorn, MatchProbabilities, MatchResult};
use crate::matrix::{Axis, Matrix, Scalar};
use crate::sparse::{cluster_stage_graph, stage_routing, StageTrace};
use crate::synth::GroundTruth;
use crate::weights::{Binder, BoundAttention, ModelWeights};

/// Derives a named sub-seed from a master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Which matching head turns the confidence matrix into scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchHead {
    DualSoftmax,
    Sinkhorn { iters: usize },
}

/// Model = learnable weights + per-stage-per-head cluster centers.
#[derive(Clone, Debug)]
pub struct Model<S = f32> {
    pub config: ModelConfig,
    pub weights: ModelWeights<S>,
    /// `[stage][head]` cluster centers, EMA state rather than parameters.
    pub clusters: Vec<Vec<ClusterState<S>>>,
    /// False until k-means seeding ran on the first training batch.
    pub centers_initialized: bool,
}

/// Everything the trainer needs from one forward pass.
pub struct ForwardPass {
    pub binder: Binder,
    /// Dual-softmax log-score matrix, `(n_a+1) × (n_b+1)`.
    pub p: Var,
    /// Dustbin-augmented confidence matrix (Sinkhorn head input).
    pub c_tilde: Var,
    pub f_a_out: Var,
    pub f_b_out: Var,
    pub stages: Vec<StageTrace>,
    pub n_a: usize,
    pub n_b: usize,
}

impl ForwardPass {
    pub fn assignments(&self) -> Vec<Vec<Assignment>> {
        self.stages
            .iter()
            .map(|t| t.routing.iter().map(|(_, a)| a.clone()).collect())
            .collect()
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "weights"));
        let weights = ModelWeights::init(&config, &mut rng);
        let dh = config.head_dim();
        let clusters = config
            .stage_schedule
            .iter()
            .enumerate()
            .map(|(s, &k)| {
                (0..config.heads)
                    .map(|h| {
                        ClusterState::random(
                            k,
                            dh,
                            s,
                            config.beta,
                            derive_seed(seed, &format!("centers.{s}.{h}")),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(Model { config, weights, clusters, centers_initialized: false })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast::<T>(),
            clusters: self
                .clusters
                .iter()
                .map(|stage| {
                    stage
                        .iter()
                        .map(|c| ClusterState {
                            centers: c.centers.cast::<T>(),
                            stage_index: c.stage_index,
                            beta: c.beta,
                        })
                        .collect()
                })
                .collect(),
            centers_initialized: self.centers_initialized,
        }
    }

    fn bind_all(&self, g: &mut Graph<S>) -> (Binder, BoundModel) {
        let mut binder = Binder::default();
        let encoder = self.weights.encoder.bind(g, &mut binder, "enc");
        let init_layers: Vec<(BoundAttention, BoundAttention)> = self
            .weights
            .init_layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    l.self_attn.bind(g, &mut binder, &format!("init{i}.self")),
                    l.cross_attn.bind(g, &mut binder, &format!("init{i}.cross")),
                )
            })
            .collect();
        let stages: Vec<Vec<BoundAttention>> = self
            .weights
            .stages
            .iter()
            .enumerate()
            .map(|(s, layers)| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| g_bind(layer, g, &mut binder, &format!("stage{s}.layer{l}")))
                    .collect()
            })
            .collect();
        let dustbin = {
            let v = g.leaf(self.weights.dustbin.clone());
            binder.pairs.push(("dustbin.z".to_string(), v));
            v
        };
        let head_scale = {
            let v = g.leaf(self.weights.head_scale.clone());
            binder.pairs.push(("head.scale".to_string(), v));
            v
        };
        (binder, BoundModel { encoder, init_layers, stages, dustbin, head_scale })
    }

    /// Full forward pass; assignments are computed from the current cluster
    /// centers unless `frozen` supplies them (gradient checks).
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        kp_a: &KeypointSet,
        kp_b: &KeypointSet,
        image_a: (u32, u32),
        image_b: (u32, u32),
        frozen: Option<&[Vec<Assignment>]>,
    ) -> Result<ForwardPass> {
        let (binder, bound) = self.bind_all(g);
        let enc_a = encode_keypoints_graph(g, kp_a, image_a, &bound.encoder)?;
        let enc_b = encode_keypoints_graph(g, kp_b, image_b, &bound.encoder)?;
        let (f_a, f_b) =
            init_graphs_graph(g, enc_a, enc_b, &bound.init_layers, self.config.chunk_queries)?;
        let mut union = g.vcat(&[f_a, f_b]);
        let mut traces = Vec::with_capacity(self.clusters.len());
        for (s, layers) in bound.stages.iter().enumerate() {
            let frozen_stage = frozen.map(|f| f[s].as_slice());
            let (next, trace) =
                cluster_stage_graph(g, union, &self.clusters[s], layers, frozen_stage)?;
            union = next;
            traces.push(trace);
        }
        let n_a = kp_a.len();
        let n_b = kp_b.len();
        let f_a_out = g.slice_rows(union, 0, n_a);
        let f_b_out = g.slice_rows(union, n_a, n_b);
        // Head: plain dot product of the scaled unit output features. The
        // learnable scale keeps the log-softmax logits in a trainable range.
        let f_a_unit = g.row_normalize(f_a_out);
        let f_b_unit = g.row_normalize(f_b_out);
        let conf_unit = g.matmul_nt(f_a_unit, f_b_unit);
        let scale_sq = g.mul_scalar(bound.head_scale, bound.head_scale);
        let conf = g.mul_scalar(conf_unit, scale_sq);
        let c_tilde = g.add_dustbin(conf, bound.dustbin);
        let lsr = g.log_softmax(c_tilde, Axis::Rows);
        let lsc = g.log_softmax(c_tilde, Axis::Cols);
        let p = g.add(lsr, lsc);
        Ok(ForwardPass { binder, p, c_tilde, f_a_out, f_b_out, stages: traces, n_a, n_b })
    }

    /// Scalar training loss: matching loss plus `gamma`-weighted per-stage
    /// cluster losses (averaged over heads). Cluster centers stay constants.
    pub fn loss_graph(
        &self,
        g: &mut Graph<S>,
        fwd: &ForwardPass,
        gt: &GroundTruth,
    ) -> Result<Var> {
        if gt.matches.is_empty() && gt.unmatched_a.is_empty() && gt.unmatched_b.is_empty() {
            return Err(Error::NoSupervision);
        }
        let (n, m) = (fwd.n_a, fwd.n_b);
        let mut terms: Vec<(Var, f64)> = Vec::new();
        if !gt.matches.is_empty() {
            let entries: Vec<(usize, usize)> = gt.matches.clone();
            let t = g.mean_neg_entries(fwd.p, Rc::new(entries));
            terms.push((t, 1.0));
        }
        if !gt.unmatched_a.is_empty() {
            let entries: Vec<(usize, usize)> = gt.unmatched_a.iter().map(|&i| (i, m)).collect();
            let t = g.mean_neg_entries(fwd.p, Rc::new(entries));
            terms.push((t, 1.0));
        }
        if !gt.unmatched_b.is_empty() {
            let entries: Vec<(usize, usize)> = gt.unmatched_b.iter().map(|&j| (n, j)).collect();
            let t = g.mean_neg_entries(fwd.p, Rc::new(entries));
            terms.push((t, 1.0));
        }
        let gamma = self.config.gamma;
        if gamma > 0.0 {
            let head_w = gamma / self.config.heads as f64;
            for (s, trace) in fwd.stages.iter().enumerate() {
                for (h, (r, asg)) in trace.routing.iter().enumerate() {
                    let t = g.cluster_dist(
                        *r,
                        Rc::new(self.clusters[s][h].centers.clone()),
                        Rc::new(asg.cid.clone()),
                    );
                    terms.push((t, head_w));
                }
            }
        }
        Ok(g.sum_scaled(&terms))
    }

    /// Inference: dual-softmax or Sinkhorn scores plus extracted matches.
    pub fn match_pair(
        &self,
        kp_a: &KeypointSet,
        kp_b: &KeypointSet,
        image_a: (u32, u32),
        image_b: (u32, u32),
        head: MatchHead,
        threshold: f64,
        threads: usize,
    ) -> Result<(MatchResult, MatchProbabilities<S>)> {
        let mut g = Graph::new(false);
        g.threads = threads;
        let fwd = self.forward(&mut g, kp_a, kp_b, image_a, image_b, None)?;
        let probs = match head {
            MatchHead::DualSoftmax => MatchProbabilities::new(g.value(fwd.p).clone()),
            MatchHead::Sinkhorn { iters } => sinkhorn(g.value(fwd.c_tilde), iters, None)?,
        };
        Ok((extract_matches(&probs, threshold), probs))
    }

    /// Seeds every stage's centers with k-means over the routing features of
    /// the given pairs, stage by stage (later stages see features produced
    /// under the earlier stages' fresh centers). Runs once per training.
    pub fn initialize_centers(
        &mut self,
        pairs: &[(&KeypointSet, &KeypointSet)],
        image_size: (u32, u32),
        seed: u64,
    ) -> Result<()> {
        assert!(!pairs.is_empty(), "center initialization needs at least one pair");
        let stages = self.clusters.len();
        for s in 0..stages {
            let mut per_head: Vec<Vec<Matrix<S>>> = vec![Vec::new(); self.config.heads];
            for (kp_a, kp_b) in pairs {
                let mut g = Graph::new(false);
                let routing =
                    self.routing_features_at_stage(&mut g, kp_a, kp_b, image_size, s)?;
                for (h, r) in routing.into_iter().enumerate() {
                    per_head[h].push(r);
                }
            }
            for (h, feats) in per_head.into_iter().enumerate() {
                let refs: Vec<&Matrix<S>> = feats.iter().collect();
                let all = Matrix::vcat(&refs);
                let k = effective_schedule(&[self.config.stage_schedule[s]], all.rows())[0];
                let mut state = kmeans_init(
                    &all,
                    k,
                    derive_seed(seed, &format!("kmeans.{s}.{h}")),
                    self.config.kmeans_iters,
                )?;
                state.stage_index = s;
                state.beta = self.config.beta;
                self.clusters[s][h] = state;
            }
        }
        self.centers_initialized = true;
        Ok(())
    }

    /// Runs the forward pass up to (excluding) stage `s` and returns that
    /// stage's per-head routing feature values.
    fn routing_features_at_stage(
        &self,
        g: &mut Graph<S>,
        kp_a: &KeypointSet,
        kp_b: &KeypointSet,
        image_size: (u32, u32),
        s: usize,
    ) -> Result<Vec<Matrix<S>>> {
        let (_, bound) = self.bind_all(g);
        let enc_a = encode_keypoints_graph(g, kp_a, image_size, &bound.encoder)?;
        let enc_b = encode_keypoints_graph(g, kp_b, image_size, &bound.encoder)?;
        let (f_a, f_b) =
            init_graphs_graph(g, enc_a, enc_b, &bound.init_layers, self.config.chunk_queries)?;
        let mut union = g.vcat(&[f_a, f_b]);
        for (prev, layers) in bound.stages.iter().enumerate().take(s) {
            let (next, _) = cluster_stage_graph(g, union, &self.clusters[prev], layers, None)?;
            union = next;
        }
        let qkr = stage_routing(g, union, &bound.stages[s][0]);
        Ok(qkr.into_iter().map(|(_, _, r)| g.value(r).clone()).collect())
    }

    /// Applies one EMA update per stage and head from a forward trace.
    pub fn ema_update_from_trace(&mut self, g: &Graph<S>, traces: &[StageTrace]) {
        for (s, trace) in traces.iter().enumerate() {
            for (h, (r, asg)) in trace.routing.iter().enumerate() {
                self.clusters[s][h] =
                    crate::cluster::ema_update(&self.clusters[s][h], g.value(*r), asg);
            }
        }
    }
}

fn g_bind<S: Scalar>(
    layer: &crate::weights::AttentionLayerWeights<S>,
    g: &mut Graph<S>,
    binder: &mut Binder,
    prefix: &str,
) -> BoundAttention {
    layer.bind(g, binder, prefix)
}

struct BoundModel {
    encoder: crate::weights::BoundMlp,
    init_layers: Vec<(BoundAttention, BoundAttention)>,
    stages: Vec<Vec<BoundAttention>>,
    dustbin: Var,
}
