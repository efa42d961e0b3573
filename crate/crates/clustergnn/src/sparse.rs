//! Cluster-masked sparse attention over the union of both images' features,
//! its dense-masked oracle, and the hierarchical stage forward pass.

use std::rc::Rc;

use crate::cluster::{assign, Assignment, ClusterState};
use crate::encoder::{linear, linear_nb, mlp, NormKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::{Mask, Matrix, Scalar};
use crate::weights::{AttentionLayerWeights, Binder, BoundAttention};

/// Dense realization of the cluster mask: `m_ij = 1` iff rows `i` and `j`
/// share a cluster under the (query/key-shared) assignment. Oracle only; the
/// fast path works from per-cluster index lists.
pub fn cluster_mask(asg: &Assignment) -> Mask {
    let n = asg.len();
    Mask::from_fn(n, n, |i, j| asg.cid[i] == asg.cid[j])
}

/// Permutation that sorts rows by cluster (stable within a cluster), the
/// resulting contiguous blocks, and the inverse permutation.
pub fn cluster_permutation(asg: &Assignment) -> (Vec<usize>, Vec<(usize, usize)>, Vec<usize>) {
    let members = asg.members();
    let mut perm = Vec::with_capacity(asg.len());
    let mut blocks = Vec::new();
    for m in &members {
        if m.is_empty() {
            continue;
        }
        blocks.push((perm.len(), m.len()));
        perm.extend_from_slice(m);
    }
    let mut inv = vec![0usize; perm.len()];
    for (pos, &i) in perm.iter().enumerate() {
        inv[i] = pos;
    }
    (perm, blocks, inv)
}

/// Per-head assignments for one layer. A single assignment may be shared by
/// every head; otherwise supply one per head.
fn head_assignment<'a>(asgs: &'a [Assignment], head: usize, heads: usize) -> &'a Assignment {
    match asgs.len() {
        1 => &asgs[0],
        n if n == heads => &asgs[head],
        n => panic!("expected 1 or {heads} assignments, got {n}"),
    }
}

/// Cluster-routed multi-head messages (post output projection). Queries
/// attend only to keys of their own cluster; computed cluster-by-cluster via
/// gather → dense block → scatter, clusters in index order.
pub fn clustered_messages_graph<S: Scalar>(
    g: &mut Graph<S>,
    f_union: Var,
    asgs: &[Assignment],
    w: &BoundAttention,
    precomputed_qk: Option<&[(Var, Var)]>,
) -> Result<Var> {
    let n = g.value(f_union).rows();
    let heads = w.heads.len();
    let mut head_outs = Vec::with_capacity(heads);
    for (h, hw) in w.heads.iter().enumerate() {
        let asg = head_assignment(asgs, h, heads);
        assert_eq!(asg.len(), n, "assignment covers all union rows");
        let (q, k) = match precomputed_qk {
            Some(qk) => qk[h],
            None => (linear(g, f_union, &hw.q), linear_nb(g, f_union, &hw.k)),
        };
        let v = linear(g, f_union, &hw.v);
        let (perm, blocks, inv) = cluster_permutation(asg);
        let qp = g.gather_rows(q, Rc::new(perm.clone()));
        let kp = g.gather_rows(k, Rc::new(perm.clone()));
        let vp = g.gather_rows(v, Rc::new(perm));
        let att = g.block_attention(qp, kp, vp, Rc::new(blocks))?;
        head_outs.push(g.gather_rows(att, Rc::new(inv)));
    }
    let cat = g.hcat(&head_outs);
    Ok(linear(g, cat, &w.out))
}

/// Full cluster-attention layer: messages plus the residual MLP update.
pub fn clustered_layer_graph<S: Scalar>(
    g: &mut Graph<S>,
    f_union: Var,
    asgs: &[Assignment],
    w: &BoundAttention,
    precomputed_qk: Option<&[(Var, Var)]>,
) -> Result<Var> {
    let msg = clustered_messages_graph(g, f_union, asgs, w, precomputed_qk)?;
    let cat = g.hcat(&[f_union, msg]);
    let update = mlp(g, cat, &w.mlp, NormKind::Layer);
    Ok(g.add(f_union, update))
}

fn bind_layer<S: Scalar>(g: &mut Graph<S>, w: &AttentionLayerWeights<S>) -> BoundAttention {
    let mut binder = Binder::default();
    w.bind(g, &mut binder, "layer")
}

/// Cluster-masked attention layer over the union features; the fast path.
///
/// `asgs` holds one assignment shared by all heads, or one per head. Every
/// query's cluster contains at least its own key, so singleton clusters are
/// valid (the feature attends to itself).
pub fn clustered_attention<S: Scalar>(
    f_union: &Matrix<S>,
    asgs: &[Assignment],
    w: &AttentionLayerWeights<S>,
) -> Result<Matrix<S>> {
    let mut g = Graph::new(false);
    let bound = bind_layer(&mut g, w);
    let f = g.leaf(f_union.clone());
    let out = clustered_layer_graph(&mut g, f, asgs, &bound, None)?;
    Ok(g.value(out).clone())
}

/// Cluster-routed messages only (no residual update); exposed for tests and
/// the benchmark.
pub fn clustered_attention_messages<S: Scalar>(
    f_union: &Matrix<S>,
    asgs: &[Assignment],
    w: &AttentionLayerWeights<S>,
) -> Result<Matrix<S>> {
    let mut g = Graph::new(false);
    let bound = bind_layer(&mut g, w);
    let f = g.leaf(f_union.clone());
    let out = clustered_messages_graph(&mut g, f, asgs, &bound, None)?;
    Ok(g.value(out).clone())
}

/// Reference semantics for [`clustered_attention`]: full dense scores with
/// the mask applied via the −1e9 sentinel before the softmax. Slow path; the
/// mask is shared by all heads.
pub fn masked_dense_oracle<S: Scalar>(
    f_union: &Matrix<S>,
    mask: &Mask,
    w: &AttentionLayerWeights<S>,
) -> Result<Matrix<S>> {
    if mask.rows() != f_union.rows() || mask.cols() != f_union.rows() {
        return Err(Error::Shape {
            op: "masked_dense_oracle",
            expected: format!("{0}x{0} mask", f_union.rows()),
            got: format!("{}x{}", mask.rows(), mask.cols()),
        });
    }
    let mut g = Graph::new(false);
    let bound = bind_layer(&mut g, w);
    let f = g.leaf(f_union.clone());
    let out = crate::encoder::gnn_layer_graph(&mut g, f, f, &bound, Some(mask), 1)?;
    Ok(g.value(out).clone())
}

/// One stage of the hierarchy: per-head cluster centers plus that stage's
/// attention layers.
pub struct Stage<'a, S> {
    pub clusters: &'a [ClusterState<S>],
    pub layers: &'a [AttentionLayerWeights<S>],
}

/// Routing record of one stage: per head, the routing features (query + key
/// projections of the stage's first layer) and the assignment they produced.
pub struct StageTrace {
    pub routing: Vec<(Var, Assignment)>,
}

/// Per-head `(query, key, routing)` projections of a stage's first layer.
/// The routing vector is the node's combined footprint `q + k` in the shared
/// query/key space that the centers live in.
pub fn stage_routing<S: Scalar>(
    g: &mut Graph<S>,
    f_union: Var,
    first: &BoundAttention,
) -> Vec<(Var, Var, Var)> {
    first
        .heads
        .iter()
        .map(|hw| {
            let q = linear(g, f_union, &hw.q);
            let k = linear_nb(g, f_union, &hw.k);
            let r = g.add(q, k);
            (q, k, r)
        })
        .collect()
}

/// Builds one hierarchy stage on the graph. The assignment is computed once,
/// from the first layer's query/key projections, and reused by every layer of
/// the stage. `frozen` substitutes precomputed assignments (the discrete
/// routing is a constant per step, so gradient checks re-use it).
pub fn cluster_stage_graph<S: Scalar>(
    g: &mut Graph<S>,
    f_union: Var,
    clusters: &[ClusterState<S>],
    layers: &[BoundAttention],
    frozen: Option<&[Assignment]>,
) -> Result<(Var, StageTrace)> {
    let first = &layers[0];
    let heads = first.heads.len();
    assert_eq!(clusters.len(), heads, "one cluster state per head");
    let qkr = stage_routing(g, f_union, first);
    let mut qk = Vec::with_capacity(heads);
    let mut routing = Vec::with_capacity(heads);
    let mut asgs = Vec::with_capacity(heads);
    for (h, (q, k, r)) in qkr.into_iter().enumerate() {
        let asg = match frozen {
            Some(f) => f[h].clone(),
            None => assign(g.value(r), &clusters[h]),
        };
        qk.push((q, k));
        routing.push((r, asg.clone()));
        asgs.push(asg);
    }
    let mut cur = clustered_layer_graph(g, f_union, &asgs, first, Some(&qk))?;
    for layer in &layers[1..] {
        cur = clustered_layer_graph(g, cur, &asgs, layer, None)?;
    }
    Ok((cur, StageTrace { routing }))
}

/// Runs the full hierarchical forward pass over the concatenated features of
/// both images and splits the result back per image.
pub fn cluster_gnn_forward<S: Scalar>(
    f_a: &Matrix<S>,
    f_b: &Matrix<S>,
    stages: &[Stage<'_, S>],
) -> Result<(Matrix<S>, Matrix<S>)> {
    let mut g = Graph::new(false);
    let va = g.leaf(f_a.clone());
    let vb = g.leaf(f_b.clone());
    let mut union = g.vcat(&[va, vb]);
    for stage in stages {
        let bound: Vec<BoundAttention> = stage
            .layers
            .iter()
            .map(|l| bind_layer(&mut g, l))
            .collect();
        let (next, _) = cluster_stage_graph(&mut g, union, stage.clusters, &bound, None)?;
        union = next;
    }
    let out_a = g.slice_rows(union, 0, f_a.rows());
    let out_b = g.slice_rows(union, f_a.rows(), f_b.rows());
    Ok((g.value(out_a).clone(), g.value(out_b).clone()))
}

/// Unmasked vs dense score-pair counts for one assignment; the benchmark's
/// arithmetic backbone.
pub fn attention_cost(n_total: usize, asg: &Assignment) -> (u64, u64) {
    let unmasked: u64 = asg.sizes.iter().map(|&s| (s as u64) * (s as u64)).sum();
    let dense = (n_total as u64) * (n_total as u64);
    (unmasked, dense)
}
