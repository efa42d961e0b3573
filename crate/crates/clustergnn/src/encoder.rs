//! Keypoint encoding and the complete-graph initialization module:
//! alternating self/cross attention over the intra/inter graphs.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::keypoints::KeypointSet;
use crate::matrix::{Mask, Matrix, Scalar};
use crate::weights::{
    AttentionLayerWeights, Binder, BoundAttention, BoundLinear, BoundLinearNoBias, BoundMlp, InitLayerWeights,
    MlpWeights,
};

pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: &BoundLinear) -> Var {
    let y = g.matmul(x, w.w);
    g.add_bias(y, w.b)
}

pub fn linear_nb<S: Scalar>(g: &mut Graph<S>, x: Var, w: &BoundLinearNoBias) -> Var {
    g.matmul(x, w.w)
}

/// Hidden-layer normalization flavor.
///
/// The keypoint encoder standardizes each channel over the current pair's
/// keypoints; attention MLPs standardize per row so that masked attention
/// stays block independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Channel,
    Layer,
}

/// Linear stack with normalization + ReLU after each hidden layer.
pub fn mlp<S: Scalar>(g: &mut Graph<S>, x: Var, w: &BoundMlp, kind: NormKind) -> Var {
    let mut cur = x;
    for (lin, norm) in &w.hidden {
        cur = linear_nb(g, cur, lin);
        cur = match kind {
            NormKind::Channel => g.channel_norm(cur, norm.gamma, norm.beta),
            NormKind::Layer => g.layer_norm(cur, norm.gamma, norm.beta),
        };
        cur = g.relu(cur);
    }
    linear(g, cur, &w.output)
}

/// Descriptors plus the encoded (normalized coords ⊕ score) vector, per row.
pub fn encode_keypoints_graph<S: Scalar>(
    g: &mut Graph<S>,
    kp: &KeypointSet,
    image_size: (u32, u32),
    enc: &BoundMlp,
) -> Result<Var> {
    let d_model = {
        let last = &enc.output;
        g.value(last.w).cols()
    };
    if kp.descriptor_dim() != d_model {
        return Err(Error::config(format!(
            "descriptor dim {} does not match model dim {d_model}",
            kp.descriptor_dim()
        )));
    }
    let desc = g.leaf(kp.descriptors.cast::<S>());
    let inputs = g.leaf(kp.encoder_inputs::<S>(image_size));
    let encoded = mlp(g, inputs, enc, NormKind::Channel);
    Ok(g.add(desc, encoded))
}

/// Multi-head attention messages: per-head scaled dot-product attention from
/// `f_tgt` queries over `f_src` keys/values, heads concatenated and projected.
pub fn attention_messages<S: Scalar>(
    g: &mut Graph<S>,
    f_tgt: Var,
    f_src: Var,
    w: &BoundAttention,
    mask: Option<&Mask>,
    chunks: usize,
) -> Result<Var> {
    let mut head_outs = Vec::with_capacity(w.heads.len());
    for h in &w.heads {
        let q = linear(g, f_tgt, &h.q);
        let k = linear_nb(g, f_src, &h.k);
        let v = linear(g, f_src, &h.v);
        head_outs.push(g.attention(q, k, v, mask, chunks)?);
    }
    let cat = g.hcat(&head_outs);
    Ok(linear(g, cat, &w.out))
}

/// Residual attention-GNN update: `f_tgt + MLP(f_tgt ⊕ messages)`.
pub fn gnn_layer_graph<S: Scalar>(
    g: &mut Graph<S>,
    f_tgt: Var,
    f_src: Var,
    w: &BoundAttention,
    mask: Option<&Mask>,
    chunks: usize,
) -> Result<Var> {
    let msg = attention_messages(g, f_tgt, f_src, w, mask, chunks)?;
    let cat = g.hcat(&[f_tgt, msg]);
    let update = mlp(g, cat, &w.mlp, NormKind::Layer);
    Ok(g.add(f_tgt, update))
}

/// Alternating self/cross attention over both images' features.
pub fn init_graphs_graph<S: Scalar>(
    g: &mut Graph<S>,
    mut f_a: Var,
    mut f_b: Var,
    layers: &[(BoundAttention, BoundAttention)],
    chunks: usize,
) -> Result<(Var, Var)> {
    for (self_w, cross_w) in layers {
        let sa = gnn_layer_graph(g, f_a, f_a, self_w, None, chunks)?;
        let sb = gnn_layer_graph(g, f_b, f_b, self_w, None, chunks)?;
        f_a = gnn_layer_graph(g, sa, sb, cross_w, None, chunks)?;
        f_b = gnn_layer_graph(g, sb, sa, cross_w, None, chunks)?;
    }
    Ok((f_a, f_b))
}

fn run_plain<S: Scalar, T>(
    build: impl FnOnce(&mut Graph<S>) -> Result<T>,
) -> Result<(Graph<S>, T)> {
    let mut g = Graph::new(false);
    let out = build(&mut g)?;
    Ok((g, out))
}

/// Encodes keypoints into initial node features: `descriptors + MLP(coords ⊕ score)`.
pub fn encode_keypoints<S: Scalar>(
    kp: &KeypointSet,
    image_size: (u32, u32),
    enc: &MlpWeights<S>,
) -> Result<Matrix<S>> {
    let (g, out) = run_plain(|g| {
        let mut binder = Binder::default();
        let bound = enc.bind(g, &mut binder, "enc");
        encode_keypoints_graph(g, kp, image_size, &bound)
    })?;
    Ok(g.value(out).clone())
}

/// Multi-head attention messages (output-projected), `n_tgt × d`.
pub fn attention<S: Scalar>(
    f_tgt: &Matrix<S>,
    f_src: &Matrix<S>,
    w: &AttentionLayerWeights<S>,
) -> Result<Matrix<S>> {
    if f_src.rows() == 0 {
        return Err(Error::Empty("attention source"));
    }
    if f_tgt.cols() != f_src.cols() {
        return Err(Error::Shape {
            op: "attention",
            expected: format!("source dim {}", f_tgt.cols()),
            got: format!("{}", f_src.cols()),
        });
    }
    let (g, out) = run_plain(|g| {
        let mut binder = Binder::default();
        let bound = w.bind(g, &mut binder, "attn");
        let tgt = g.leaf(f_tgt.clone());
        let src = g.leaf(f_src.clone());
        attention_messages(g, tgt, src, &bound, None, 1)
    })?;
    Ok(g.value(out).clone())
}

/// One attention-GNN layer; self-attention is the `f_src = f_tgt` case.
pub fn gnn_layer<S: Scalar>(
    f_tgt: &Matrix<S>,
    f_src: &Matrix<S>,
    w: &AttentionLayerWeights<S>,
) -> Result<Matrix<S>> {
    if f_src.rows() == 0 {
        return Err(Error::Empty("attention source"));
    }
    let (g, out) = run_plain(|g| {
        let mut binder = Binder::default();
        let bound = w.bind(g, &mut binder, "attn");
        let tgt = g.leaf(f_tgt.clone());
        let src = g.leaf(f_src.clone());
        gnn_layer_graph(g, tgt, src, &bound, None, 1)
    })?;
    Ok(g.value(out).clone())
}

/// Runs the complete-graph initialization stack over both feature sets.
pub fn init_graphs<S: Scalar>(
    f_a: &Matrix<S>,
    f_b: &Matrix<S>,
    layers: &[InitLayerWeights<S>],
    chunks: usize,
) -> Result<(Matrix<S>, Matrix<S>)> {
    let (g, (va, vb)) = run_plain(|g| {
        let mut binder = Binder::default();
        let bound: Vec<_> = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    l.self_attn.bind(g, &mut binder, &format!("init{i}.self")),
                    l.cross_attn.bind(g, &mut binder, &format!("init{i}.cross")),
                )
            })
            .collect();
        let a = g.leaf(f_a.clone());
        let b = g.leaf(f_b.clone());
        init_graphs_graph(g, a, b, &bound, chunks)
    })?;
    Ok((g.value(va).clone(), g.value(vb).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randmat(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0f32..1.0))
    }

    fn randkp(n: usize, d: usize, r: &mut ChaCha8Rng) -> KeypointSet {
        KeypointSet {
            coords: (0..n)
                .map(|_| [r.gen_range(0.0..640.0), r.gen_range(0.0..480.0)])
                .collect(),
            scores: (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
            descriptors: randmat(n, d, r),
        }
    }

    #[test]
    fn zero_mlp_returns_descriptors_exactly() {
        let mut r = rng(1);
        let kp = randkp(5, 8, &mut r);
        let mut enc = MlpWeights::<f32>::init(&mut r, &[3, 8, 8, 8, 8]);
        enc.zero_last();
        let out = encode_keypoints(&kp, (640, 480), &enc).unwrap();
        assert_eq!(out, kp.descriptors);
    }

    #[test]
    fn single_center_keypoint_matches_hand_mlp() {
        // One hidden layer wide enough to hand-evaluate: with a single
        // keypoint the channel norm sees one row, so xhat = 0 and the hidden
        // activation is relu(beta) = 0 with default beta, leaving only the
        // final layer bias.
        let mut r = rng(2);
        let d = 4;
        let mut enc = MlpWeights::<f32>::init(&mut r, &[3, d, d]);
        enc.output.b = Matrix::from_vec(1, d, vec![0.25, -0.5, 1.5, 0.0]);
        let kp = KeypointSet {
            coords: vec![[320.0, 240.0]],
            scores: vec![0.5],
            descriptors: Matrix::from_vec(1, d, vec![1.0, 2.0, 3.0, 4.0]),
        };
        let out = encode_keypoints(&kp, (640, 480), &enc).unwrap();
        // hand oracle: encoder input is [0, 0, 0.5]; norm(one row) = 0;
        // relu(0 * gamma + beta=0) = 0; final = b2; output = desc + b2.
        let expect = [1.25f32, 1.5, 4.5, 4.0];
        for j in 0..d {
            assert!((out.at(0, j) - expect[j]).abs() < 1e-6, "col {j}: {}", out.at(0, j));
        }
    }

    #[test]
    fn encoding_is_rowwise() {
        let mut r = rng(3);
        let kp = randkp(6, 8, &mut r);
        let enc = MlpWeights::<f32>::init(&mut r, &[3, 8, 8, 8, 8]);
        let out = encode_keypoints(&kp, (640, 480), &enc).unwrap();
        let perm = [4usize, 2, 0, 5, 1, 3];
        let kp_perm = KeypointSet {
            coords: perm.iter().map(|&i| kp.coords[i]).collect(),
            scores: perm.iter().map(|&i| kp.scores[i]).collect(),
            descriptors: kp.descriptors.gather_rows(&perm),
        };
        let out_perm = encode_keypoints(&kp_perm, (640, 480), &enc).unwrap();
        // Channel-norm statistics are permutation invariant, so rows map 1:1.
        assert!(out.gather_rows(&perm).max_abs_diff(&out_perm) < 1e-6);
    }

    #[test]
    fn descriptor_dim_mismatch_is_config_error() {
        let mut r = rng(4);
        let kp = randkp(3, 16, &mut r);
        let enc = MlpWeights::<f32>::init(&mut r, &[3, 8, 8]);
        assert!(matches!(
            encode_keypoints(&kp, (640, 480), &enc),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_source_broadcasts_its_value() {
        let mut r = rng(5);
        let d = 8;
        let mut w = AttentionLayerWeights::<f32>::init(&mut r, d, 2);
        // Identity output projection exposes the concatenated value vectors.
        w.out.w = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        w.out.b = Matrix::zeros(1, d);
        let f_tgt = randmat(5, d, &mut r);
        let f_src = randmat(1, d, &mut r);
        let out = attention(&f_tgt, &f_src, &w).unwrap();
        let mut expect = Vec::new();
        for h in &w.heads {
            let v = h.v.apply(&f_src);
            expect.extend_from_slice(v.row(0));
        }
        for i in 0..5 {
            for j in 0..d {
                assert!((out.at(i, j) - expect[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicated_sources_do_not_change_messages() {
        let mut r = rng(6);
        let d = 8;
        let w = AttentionLayerWeights::<f32>::init(&mut r, d, 2);
        let f_tgt = randmat(4, d, &mut r);
        let f_src = randmat(3, d, &mut r);
        let dup = Matrix::vcat(&[&f_src, &f_src, &f_src]);
        let a = attention(&f_tgt, &f_src, &w).unwrap();
        let b = attention(&f_tgt, &dup, &w).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn empty_source_errors() {
        let mut r = rng(7);
        let w = AttentionLayerWeights::<f32>::init(&mut r, 8, 2);
        let f_tgt = randmat(3, 8, &mut r);
        let f_src = Matrix::zeros(0, 8);
        assert!(attention(&f_tgt, &f_src, &w).is_err());
    }

    #[test]
    fn three_by_three_matches_hand_computation() {
        // Single head, hand-set projections, replicated step by step in f64.
        let d = 2;
        let mut r = rng(8);
        let mut w = AttentionLayerWeights::<f32>::init(&mut r, d, 1);
        w.heads[0].q = crate::weights::LinearWeights {
            w: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            b: Matrix::zeros(1, 2),
        };
        w.heads[0].k = crate::weights::LinearNoBias {
            w: Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]),
        };
        w.heads[0].v = crate::weights::LinearWeights {
            w: Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 0.5]),
            b: Matrix::zeros(1, 2),
        };
        w.out.w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        w.out.b = Matrix::zeros(1, 2);
        let f_tgt = Matrix::from_vec(3, 2, vec![0.5, -1.0, 0.2, 0.3, -0.7, 0.9]);
        let f_src = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]);
        let got = attention(&f_tgt, &f_src, &w).unwrap();

        // independent f64 oracle
        let tgt: Vec<[f64; 2]> = vec![[0.5, -1.0], [0.2, 0.3], [-0.7, 0.9]];
        let src: Vec<[f64; 2]> = vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]];
        let scale = 1.0 / (2f64).sqrt();
        for (i, t) in tgt.iter().enumerate() {
            let q = [t[0], t[1]];
            let ks: Vec<[f64; 2]> = src.iter().map(|s| [s[1], s[0]]).collect();
            let vs: Vec<[f64; 2]> = src.iter().map(|s| [2.0 * s[0], 0.5 * s[1]]).collect();
            let logits: Vec<f64> = ks.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) * scale).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut out = [0f64; 2];
            for (e, v) in exps.iter().zip(&vs) {
                out[0] += e / z * v[0];
                out[1] += e / z * v[1];
            }
            assert!((got.at(i, 0) as f64 - out[0]).abs() < 1e-6);
            assert!((got.at(i, 1) as f64 - out[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_mlp_makes_layer_an_identity() {
        let mut r = rng(9);
        let d = 8;
        let mut w = AttentionLayerWeights::<f32>::init(&mut r, d, 2);
        w.mlp.zero_last();
        let f_tgt = randmat(4, d, &mut r);
        let f_src = randmat(6, d, &mut r);
        let out = gnn_layer(&f_tgt, &f_src, &w).unwrap();
        assert_eq!(out, f_tgt);
    }

    #[test]
    fn self_attention_is_cross_with_itself() {
        let mut r = rng(10);
        let d = 8;
        let w = AttentionLayerWeights::<f32>::init(&mut r, d, 2);
        let f = randmat(5, d, &mut r);
        let sa = gnn_layer(&f, &f, &w).unwrap();
        let ca = gnn_layer(&f, &f.clone(), &w).unwrap();
        assert_eq!(sa, ca);
    }

    #[test]
    fn layer_output_shape_follows_target() {
        let mut r = rng(11);
        let d = 8;
        let w = AttentionLayerWeights::<f32>::init(&mut r, d, 2);
        let out = gnn_layer(&randmat(7, d, &mut r), &randmat(5, d, &mut r), &w).unwrap();
        assert_eq!(out.shape(), (7, d));
    }

    #[test]
    fn depth_zero_returns_inputs() {
        let mut r = rng(12);
        let a = randmat(4, 8, &mut r);
        let b = randmat(5, 8, &mut r);
        let (oa, ob) = init_graphs(&a, &b, &[], 1).unwrap();
        assert_eq!(oa, a);
        assert_eq!(ob, b);
    }

    #[test]
    fn swapping_images_swaps_outputs() {
        let cfg = ModelConfig { d: 8, heads: 2, init_depth: 2, ..ModelConfig::default() };
        let mut r = rng(13);
        let layers: Vec<InitLayerWeights<f32>> = {
            let w = crate::weights::ModelWeights::<f32>::init(&cfg, &mut r);
            w.init_layers
        };
        let a = randmat(4, 8, &mut r);
        let b = randmat(6, 8, &mut r);
        let (oa, ob) = init_graphs(&a, &b, &layers, 1).unwrap();
        let (sb, sa) = init_graphs(&b, &a, &layers, 1).unwrap();
        assert!(oa.max_abs_diff(&sa) < 1e-6);
        assert!(ob.max_abs_diff(&sb) < 1e-6);
    }

    #[test]
    fn query_chunking_matches_unchunked() {
        let cfg = ModelConfig { d: 8, heads: 2, init_depth: 3, ..ModelConfig::default() };
        let mut r = rng(14);
        let layers = crate::weights::ModelWeights::<f32>::init(&cfg, &mut r).init_layers;
        let a = randmat(9, 8, &mut r);
        let b = randmat(7, 8, &mut r);
        let (oa1, ob1) = init_graphs(&a, &b, &layers, 1).unwrap();
        let (oa4, ob4) = init_graphs(&a, &b, &layers, 4).unwrap();
        assert!(oa1.max_abs_diff(&oa4) < 1e-6);
        assert!(ob1.max_abs_diff(&ob4) < 1e-6);
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = ModelConfig { d: 8, heads: 2, init_depth: 2, ..ModelConfig::default() };
        let mut r = rng(15);
        let layers = crate::weights::ModelWeights::<f32>::init(&cfg, &mut r).init_layers;
        let a = randmat(5, 8, &mut r);
        let b = randmat(4, 8, &mut r);
        let pa = [3usize, 0, 4, 1, 2];
        let pb = [2usize, 3, 1, 0];
        let (oa, ob) = init_graphs(&a, &b, &layers, 1).unwrap();
        let (oa_p, ob_p) = init_graphs(&a.gather_rows(&pa), &b.gather_rows(&pb), &layers, 1).unwrap();
        assert!(oa.gather_rows(&pa).max_abs_diff(&oa_p) < 1e-6);
        assert!(ob.gather_rows(&pb).max_abs_diff(&ob_p) < 1e-6);
    }

    #[test]
    fn outputs_stay_finite_on_large_inputs() {
        let cfg = ModelConfig { d: 8, heads: 2, init_depth: 3, ..ModelConfig::default() };
        let mut r = rng(16);
        let layers = crate::weights::ModelWeights::<f32>::init(&cfg, &mut r).init_layers;
        let a = Matrix::from_fn(6, 8, |_, _| r.gen_range(-10.0f32..10.0));
        let b = Matrix::from_fn(6, 8, |_, _| r.gen_range(-10.0f32..10.0));
        let (oa, ob) = init_graphs(&a, &b, &layers, 1).unwrap();
        assert!(oa.all_finite());
        assert!(ob.all_finite());
    }
}
