//! Desk-scale training: Adam over analytic gradients, per-step EMA center
//! updates, empty-cluster repair, and precision/recall evaluation on held-out
//! synthetic pairs.

use std::collections::BTreeMap;

use crate::cluster::{discrepancy, Assignment};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::model::{derive_seed, MatchHead, Model};
use crate::synth::{generate_pair_sized, label_ground_truth, DescriptorModel, SyntheticPair};

pub const EPS_MATCH_PX: f64 = 3.0;
pub const EPS_NONMATCH_PX: f64 = 5.0;

/// Adam with bias correction; state is keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, weights: &mut crate::weights::ModelWeights<f32>, grads: &BTreeMap<String, Matrix<f32>>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        weights.visit_mut(&mut |name, param| {
            let Some(grad) = grads.get(&name) else { return };
            let n = param.rows() * param.cols();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            for (idx, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g as f64;
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + self.eps);
                *p = (*p as f64 - update) as f32;
            }
        });
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalStats {
    pub precision: f64,
    pub recall: f64,
    pub predicted: usize,
    pub true_matches: usize,
}

impl EvalStats {
    pub fn f1(&self) -> f64 {
        if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub match_loss: f64,
    pub cluster_loss: f64,
    pub precision: f64,
    pub recall: f64,
}

impl EpochMetrics {
    /// Line-delimited structured record; byte-stable across runs.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} steps={} loss={:.6} match_loss={:.6} cluster_loss={:.6} precision={:.4} recall={:.4}",
            self.epoch, self.steps, self.loss, self.match_loss, self.cluster_loss,
            self.precision, self.recall
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainEnd {
    Completed,
    /// Training stopped at this step because the loss went non-finite; the
    /// returned model is the last good state.
    AbortedNonFinite { step: usize },
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub end: TrainEnd,
}

pub fn descriptor_model_for(cfg: &TrainConfig, seed: u64) -> DescriptorModel {
    DescriptorModel::new(cfg.model.d, cfg.descriptor_noise, derive_seed(seed, "descriptors"))
}

fn training_pair(cfg: &TrainConfig, dm: &DescriptorModel, seed: u64, index: u64) -> Result<SyntheticPair> {
    generate_pair_sized(
        derive_seed(seed, &format!("train.{index}")),
        cfg.n_keypoints,
        cfg.noise_px,
        cfg.outlier_frac,
        dm,
        (cfg.image_w, cfg.image_h),
    )
}

pub fn eval_pair(cfg: &TrainConfig, dm: &DescriptorModel, seed: u64, index: u64) -> Result<SyntheticPair> {
    generate_pair_sized(
        derive_seed(seed, &format!("eval.{index}")),
        cfg.n_keypoints,
        cfg.noise_px,
        cfg.outlier_frac,
        dm,
        (cfg.image_w, cfg.image_h),
    )
}

/// Micro-averaged precision/recall of the model's matches against
/// reprojection ground truth over `count` held-out pairs.
pub fn evaluate(
    model: &Model<f32>,
    cfg: &TrainConfig,
    dm: &DescriptorModel,
    seed: u64,
    count: usize,
    head: MatchHead,
) -> Result<EvalStats> {
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut truth = 0usize;
    for idx in 0..count {
        let pair = eval_pair(cfg, dm, seed, idx as u64)?;
        let gt = label_ground_truth(&pair, EPS_MATCH_PX, EPS_NONMATCH_PX)?;
        let (result, _) = model.match_pair(
            &pair.kp_a,
            &pair.kp_b,
            pair.image_size,
            pair.image_size,
            head,
            cfg.match_threshold,
            1,
        )?;
        let gtset: std::collections::BTreeSet<(usize, usize)> =
            gt.matches.iter().copied().collect();
        predicted += result.pairs.len();
        truth += gt.matches.len();
        tp += result
            .pairs
            .iter()
            .filter(|&&(i, j, _)| gtset.contains(&(i, j)))
            .count();
    }
    Ok(EvalStats {
        precision: if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 },
        recall: if truth == 0 { 0.0 } else { tp as f64 / truth as f64 },
        predicted,
        true_matches: truth,
    })
}

/// Trains a fresh model on a stream of synthetic pairs. Fully deterministic
/// for a given config and seed.
pub fn train(
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::<f32>::new(cfg.model.clone(), derive_seed(seed, "model"))?;
    let dm = descriptor_model_for(cfg, seed);
    let image = (cfg.image_w, cfg.image_h);

    // k-means seeding on the first batch
    let first_batch: Vec<SyntheticPair> = (0..cfg.batch_size)
        .map(|i| training_pair(cfg, &dm, seed, i as u64))
        .collect::<Result<_>>()?;
    let refs: Vec<(&crate::keypoints::KeypointSet, &crate::keypoints::KeypointSet)> =
        first_batch.iter().map(|p| (&p.kp_a, &p.kp_b)).collect();
    model.initialize_centers(&refs, image, derive_seed(seed, "kmeans"))?;

    let mut adam = Adam::new(cfg.lr);
    let mut metrics = Vec::new();
    let mut pair_index = 0u64;
    let mut step = 0usize;
    let stages = model.clusters.len();
    let heads = cfg.model.heads;

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_match = 0.0;
        let mut epoch_cluster = 0.0;
        let mut supervised_steps = 0usize;
        let mut seen_members: Vec<Vec<Vec<bool>>> = model
            .clusters
            .iter()
            .map(|s| s.iter().map(|c| vec![false; c.k()]).collect())
            .collect();
        let mut last_routing: Vec<Vec<Option<(Matrix<f32>, Assignment)>>> =
            vec![vec![None; heads]; stages];

        let batches = cfg.pairs_per_epoch.div_ceil(cfg.batch_size);
        for _ in 0..batches {
            let mut grads: BTreeMap<String, Matrix<f32>> = BTreeMap::new();
            let mut batch_routing: Vec<Vec<(Matrix<f32>, Vec<usize>)>> =
                vec![(0..heads).map(|_| (Matrix::zeros(0, 0), Vec::new())).collect(); 0];
            batch_routing.resize_with(stages, || {
                (0..heads).map(|_| (Matrix::zeros(0, 0), Vec::new())).collect()
            });
            let mut batch_loss = 0.0;
            let mut batch_match = 0.0;
            let mut batch_cluster = 0.0;
            let mut in_batch = 0usize;

            for _ in 0..cfg.batch_size {
                let pair = training_pair(cfg, &dm, seed, pair_index)?;
                pair_index += 1;
                let gt = label_ground_truth(&pair, EPS_MATCH_PX, EPS_NONMATCH_PX)?;
                if gt.matches.is_empty() && gt.unmatched_a.is_empty() && gt.unmatched_b.is_empty() {
                    continue;
                }
                let mut g = Graph::new(true);
                let fwd = model.forward(&mut g, &pair.kp_a, &pair.kp_b, image, image, None)?;
                let loss = model.loss_graph(&mut g, &fwd, &gt)?;
                let loss_v = g.value(loss).item() as f64;
                if !loss_v.is_finite() {
                    return Ok(TrainOutcome {
                        model,
                        metrics,
                        end: TrainEnd::AbortedNonFinite { step },
                    });
                }
                let lm = crate::loss::matching_loss(
                    &crate::matcher::MatchProbabilities::new(g.value(fwd.p).clone()),
                    &gt,
                )?;
                batch_loss += loss_v;
                batch_match += lm;
                batch_cluster += loss_v - lm;
                in_batch += 1;

                g.backward(loss);
                for (name, var) in &fwd.binder.pairs {
                    if let Some(grad) = g.grad(*var) {
                        match grads.get_mut(name) {
                            Some(acc) => acc.add_assign(grad),
                            None => {
                                grads.insert(name.clone(), grad.clone());
                            }
                        }
                    }
                }
                for (s, trace) in fwd.stages.iter().enumerate() {
                    for (h, (r, asg)) in trace.routing.iter().enumerate() {
                        let (feats, cids) = &mut batch_routing[s][h];
                        let rv = g.value(*r);
                        *feats = if feats.rows() == 0 {
                            rv.clone()
                        } else {
                            Matrix::vcat(&[feats, rv])
                        };
                        cids.extend_from_slice(&asg.cid);
                        for &c in &asg.cid {
                            seen_members[s][h][c] = true;
                        }
                    }
                }
            }
            if in_batch == 0 {
                continue;
            }
            step += 1;
            supervised_steps += 1;
            epoch_loss += batch_loss / in_batch as f64;
            epoch_match += batch_match / in_batch as f64;
            epoch_cluster += batch_cluster / in_batch as f64;

            let scale = 1.0 / in_batch as f64;
            for grad in grads.values_mut() {
                *grad = grad.scale(scale);
            }
            adam.step(&mut model.weights, &grads);

            // one EMA update per step per stage, over the batch's features
            for s in 0..stages {
                for h in 0..heads {
                    let (feats, cids) = &batch_routing[s][h];
                    if feats.rows() == 0 {
                        continue;
                    }
                    let asg = Assignment::new(cids.clone(), model.clusters[s][h].k());
                    model.clusters[s][h] =
                        crate::cluster::ema_update(&model.clusters[s][h], feats, &asg);
                    last_routing[s][h] = Some((feats.clone(), asg));
                }
            }
        }

        // Epoch-end repair: a cluster empty for the whole epoch is reseeded to
        // the feature farthest from its current center.
        for s in 0..stages {
            for h in 0..heads {
                let Some((feats, _)) = &last_routing[s][h] else { continue };
                for c in 0..model.clusters[s][h].k() {
                    if seen_members[s][h][c] {
                        continue;
                    }
                    let center = model.clusters[s][h].centers.row(c).to_vec();
                    let mut far = 0usize;
                    let mut far_d = -1.0;
                    for i in 0..feats.rows() {
                        let d = discrepancy(&center, feats.row(i)).unwrap_or(0.0);
                        if d > far_d {
                            far_d = d;
                            far = i;
                        }
                    }
                    let row = feats.row(far).to_vec();
                    model.clusters[s][h]
                        .centers
                        .row_mut(c)
                        .copy_from_slice(&row);
                }
            }
        }

        let quick = evaluate(&model, cfg, &dm, seed, cfg.eval_pairs.min(16), MatchHead::DualSoftmax)?;
        let n = supervised_steps.max(1) as f64;
        let em = EpochMetrics {
            epoch: epoch + 1,
            steps: step,
            loss: epoch_loss / n,
            match_loss: epoch_match / n,
            cluster_loss: epoch_cluster / n,
            precision: quick.precision,
            recall: quick.recall,
        };
        on_epoch(&em);
        metrics.push(em);
    }

    Ok(TrainOutcome { model, metrics, end: TrainEnd::Completed })
}

/// Verifies analytic gradients of the total loss against central differences,
/// per parameter group, on a frozen-routing forward pass. Returns
/// `(group name, max relative error)` per group.
pub fn check_gradients(
    model: &Model<f64>,
    kp_a: &crate::keypoints::KeypointSet,
    kp_b: &crate::keypoints::KeypointSet,
    image: (u32, u32),
    gt: &crate::synth::GroundTruth,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    // Reference pass: capture assignments, then analytic gradients.
    let mut g = Graph::new(true);
    let fwd = model.forward(&mut g, kp_a, kp_b, image, image, None)?;
    let frozen = fwd.assignments();
    let loss = model.loss_graph(&mut g, &fwd, gt)?;
    g.backward(loss);
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, var) in &fwd.binder.pairs {
        let grad = g
            .grad(*var)
            .map(|m| m.data().to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(*var).rows() * g.value(*var).cols()]);
        analytic.insert(name.clone(), grad);
    }

    let mut names: Vec<String> = Vec::new();
    model.weights.visit(&mut |name, _| names.push(name));

    let mut results = Vec::new();
    for name in names {
        let mut x = Vec::new();
        model.weights.visit(&mut |n, m| {
            if n == name {
                x = m.data().to_vec();
            }
        });
        let f = |xs: &[f64]| -> f64 {
            let mut probe = model.clone();
            probe.weights.visit_mut(&mut |n, m| {
                if n == name {
                    m.data_mut().copy_from_slice(xs);
                }
            });
            let mut g2 = Graph::new(false);
            let fwd2 = probe
                .forward(&mut g2, kp_a, kp_b, image, image, Some(&frozen))
                .expect("frozen forward");
            let loss2 = probe.loss_graph(&mut g2, &fwd2, gt).expect("loss");
            g2.value(loss2).item()
        };
        let err = grad_check(f, &x, &analytic[&name], h)?;
        results.push((name, err));
    }
    Ok(results)
}
