//! Learnable parameter containers, their initialization, and graph binding.
//!
//! Every weight struct exposes `visit`/`visit_mut` (stable names, used by the
//! optimizer and the weights file) and `bind` (creates graph leaves once per
//! forward pass and records name ↔ variable pairs for gradient collection).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, Var};
use crate::matrix::{Matrix, Scalar};

pub type ParamFn<'a, S> = dyn FnMut(String, &'a Matrix<S>) + 'a;
pub type ParamFnMut<'a, S> = dyn FnMut(String, &mut Matrix<S>) + 'a;

/// Records `(name, Var)` pairs as weights are bound into a graph.
#[derive(Default)]
pub struct Binder {
    pub pairs: Vec<(String, Var)>,
}

impl Binder {
    fn bind<S: Scalar>(&mut self, g: &mut Graph<S>, name: String, m: &Matrix<S>) -> Var {
        let v = g.leaf(m.clone());
        self.pairs.push((name, v));
        v
    }
}

fn glorot<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| S::from64(rng.gen_range(-a..a)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearWeights<S> {
    /// `in × out`.
    pub w: Matrix<S>,
    /// `1 × out`.
    pub b: Matrix<S>,
}

impl<S: Scalar> LinearWeights<S> {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        LinearWeights {
            w: glorot(rng, d_in, d_out),
            b: Matrix::zeros(1, d_out),
        }
    }

    /// `x · w` plus the broadcast bias.
    pub fn apply(&self, x: &Matrix<S>) -> Matrix<S> {
        let mut out = x.matmul(&self.w);
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(self.b.row(0)) {
                *o = *o + b;
            }
        }
        out
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut ParamFn<'a, S>) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, S>) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, g: &mut Graph<S>, binder: &mut Binder, prefix: &str) -> BoundLinear {
        BoundLinear {
            w: binder.bind(g, format!("{prefix}.w"), &self.w),
            b: binder.bind(g, format!("{prefix}.b"), &self.b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

/// Bias-free projection. Used where a bias would be a dead parameter: hidden
/// layers feeding a mean-subtracting norm, and key projections (a key bias
/// shifts every attention row by a constant the softmax removes).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearNoBias<S> {
    pub w: Matrix<S>,
}

impl<S: Scalar> LinearNoBias<S> {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        LinearNoBias { w: glorot(rng, d_in, d_out) }
    }

    pub fn apply(&self, x: &Matrix<S>) -> Matrix<S> {
        x.matmul(&self.w)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut ParamFn<'a, S>) {
        f(format!("{prefix}.w"), &self.w);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, S>) {
        f(format!("{prefix}.w"), &mut self.w);
    }

    pub fn bind(&self, g: &mut Graph<S>, binder: &mut Binder, prefix: &str) -> BoundLinearNoBias {
        BoundLinearNoBias { w: binder.bind(g, format!("{prefix}.w"), &self.w) }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinearNoBias {
    pub w: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights<S> {
    pub gamma: Matrix<S>,
    pub beta: Matrix<S>,
}

impl<S: Scalar> NormWeights<S> {
    fn init(width: usize) -> Self {
        NormWeights {
            gamma: Matrix::filled(1, width, S::one()),
            beta: Matrix::zeros(1, width),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut ParamFn<'a, S>) {
        f(format!("{prefix}.g"), &self.gamma);
        f(format!("{prefix}.be"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, S>) {
        f(format!("{prefix}.g"), &mut self.gamma);
        f(format!("{prefix}.be"), &mut self.beta);
    }

    pub fn bind(&self, g: &mut Graph<S>, binder: &mut Binder, prefix: &str) -> BoundNorm {
        BoundNorm {
            gamma: binder.bind(g, format!("{prefix}.g"), &self.gamma),
            beta: binder.bind(g, format!("{prefix}.be"), &self.beta),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
}

/// Linear stack: bias-free hidden layers each followed by normalization
/// (whose shift parameter plays the bias role) + ReLU, then a plain final
/// linear with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<S> {
    pub hidden: Vec<(LinearNoBias<S>, NormWeights<S>)>,
    pub output: LinearWeights<S>,
}

impl<S: Scalar> MlpWeights<S> {
    pub fn init(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let hidden = dims[..dims.len() - 1]
            .windows(2)
            .map(|w| (LinearNoBias::init(rng, w[0], w[1]), NormWeights::init(w[1])))
            .collect();
        let output = LinearWeights::init(rng, dims[dims.len() - 2], dims[dims.len() - 1]);
        MlpWeights { hidden, output }
    }

    /// Zeroes the final linear layer so the MLP output (and any residual
    /// update it feeds) vanishes; used by tests.
    pub fn zero_last(&mut self) {
        self.output.w = Matrix::zeros(self.output.w.rows(), self.output.w.cols());
        self.output.b = Matrix::zeros(1, self.output.b.cols());
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut ParamFn<'a, S>) {
        for (i, (l, n)) in self.hidden.iter().enumerate() {
            l.visit(&format!("{prefix}.lin{i}"), f);
            n.visit(&format!("{prefix}.norm{i}"), f);
        }
        self.output.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, S>) {
        for (i, (l, n)) in self.hidden.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.lin{i}"), f);
            n.visit_mut(&format!("{prefix}.norm{i}"), f);
        }
        self.output.visit_mut(&format!("{prefix}.out"), f);
    }

    pub fn bind(&self, g: &mut Graph<S>, binder: &mut Binder, prefix: &str) -> BoundMlp {
        BoundMlp {
            hidden: self
                .hidden
                .iter()
                .enumerate()
                .map(|(i, (l, n))| {
                    (
                        l.bind(g, binder, &format!("{prefix}.lin{i}")),
                        n.bind(g, binder, &format!("{prefix}.norm{i}")),
                    )
                })
                .collect(),
            output: self.output.bind(g, binder, &format!("{prefix}.out")),
        }
    }
}

#[derive(Clone)]
pub struct BoundMlp {
    pub hidden: Vec<(BoundLinearNoBias, BoundNorm)>,
    pub output: BoundLinear,
}

/// Per-head query/key/value projections. The key projection is bias-free;
/// a key bias cancels in the row softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<S> {
    pub q: LinearWeights<S>,
    pub k: LinearNoBias<S>,
    pub v: LinearWeights<S>,
}

impl<S: Scalar> HeadWeights<S> {
    fn init(rng: &mut ChaCha8Rng, d: usize, dh: usize) -> Self {
        HeadWeights {
            q: LinearWeights::init(rng, d, dh),
            k: LinearNoBias::init(rng, d, dh),
            v: LinearWeights::init(rng, d, dh),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut ParamFn<'a, S>) {
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, S>) {
        self.q.visit_mut(&format!("{prefix}.q"), f);
        self.k.visit_mut(&format!("{prefix}.k"), f);
        self.v.visit_mut(&format!("{prefix}.v"), f);
    }

    pub fn bind(&self, g: &mut Graph<S>, binder: &mut Binder, prefix: &str) -> BoundHead {
        BoundHead {
            q: self.q.bind(g, binder, &format!("{prefix}.q")),
            k: self.k.bind(g, binder, &format!("{prefix}.k")),
            v: self.v.bind(g, binder, &format!("{prefix}.v")),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundHead {
    pub q: BoundLinear,
    pub k: BoundLinearNoBias,
    pub v: BoundLinear,
}

/// One attention GNN layer: multi-head projections, output projection, and
/// the residual message MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerWeights<S> {
    pub heads: Vec<HeadWeights<S>>,
    pub out: LinearWeights<S>,
    pub mlp: MlpWeights<S>,
}

impl<S: Scalar> AttentionLayerWeights<S> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        assert_eq!(d % heads, 0, "heads must divide feature dim");
        let dh = d / heads;
        AttentionLayerWeights {
            heads: (0..heads).map(|_| HeadWeights::init(rng, d, dh)).collect(),
            out: LinearWeights::init(rng, d, d),
            mlp: MlpWeights::init(rng, &[2 * d, 2 * d, d]),
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.out.w.rows()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut ParamFn<'a, S>) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{prefix}.h{i}"), f);
        }
        self.out.visit(&format!("{prefix}.out"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, S>) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.h{i}"), f);
        }
        self.out.visit_mut(&format!("{prefix}.out"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }

    pub fn bind(&self, g: &mut Graph<S>, binder: &mut Binder, prefix: &str) -> BoundAttention {
        BoundAttention {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| h.bind(g, binder, &format!("{prefix}.h{i}")))
                .collect(),
            out: self.out.bind(g, binder, &format!("{prefix}.out")),
            mlp: self.mlp.bind(g, binder, &format!("{prefix}.mlp")),
        }
    }
}

#[derive(Clone)]
pub struct BoundAttention {
    pub heads: Vec<BoundHead>,
    pub out: BoundLinear,
    pub mlp: BoundMlp,
}

/// Self + cross attention pair of the complete-graph initialization module;
/// weights are shared across the two images and both cross directions.
#[derive(Clone, Debug, PartialEq)]
pub struct InitLayerWeights<S> {
    pub self_attn: AttentionLayerWeights<S>,
    pub cross_attn: AttentionLayerWeights<S>,
}

impl<S: Scalar> InitLayerWeights<S> {
    fn init(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        InitLayerWeights {
            self_attn: AttentionLayerWeights::init(rng, d, heads),
            cross_attn: AttentionLayerWeights::init(rng, d, heads),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut ParamFn<'a, S>) {
        self.self_attn.visit(&format!("{prefix}.self"), f);
        self.cross_attn.visit(&format!("{prefix}.cross"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamFnMut<'_, S>) {
        self.self_attn.visit_mut(&format!("{prefix}.self"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross"), f);
    }
}

/// All learnable parameters of the matcher network. Cluster centers live in
/// [`crate::model::Model`] since they are EMA state, not backprop parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<S> {
    pub encoder: MlpWeights<S>,
    pub init_layers: Vec<InitLayerWeights<S>>,
    pub stages: Vec<Vec<AttentionLayerWeights<S>>>,
    /// Shared dustbin score, `1 × 1`.
    pub dustbin: Matrix<S>,
    /// Per-side logit scale applied to the L2-normalized output features
    /// ahead of the dot-product head, `1 × 1`.
    pub head_scale: Matrix<S>,
}

impl<S: Scalar> ModelWeights<S> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d;
        ModelWeights {
            encoder: MlpWeights::init(rng, &[3, d, d, d, d]),
            init_layers: (0..config.init_depth)
                .map(|_| InitLayerWeights::init(rng, d, config.heads))
                .collect(),
            stages: config
                .stage_schedule
                .iter()
                .map(|_| {
                    (0..config.layers_per_stage)
                        .map(|_| AttentionLayerWeights::init(rng, d, config.heads))
                        .collect()
                })
                .collect(),
            dustbin: Matrix::filled(1, 1, S::one()),
            head_scale: Matrix::filled(1, 1, S::from64(10f64.sqrt())),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut ParamFn<'a, S>) {
        self.encoder.visit("enc", f);
        for (i, l) in self.init_layers.iter().enumerate() {
            l.visit(&format!("init{i}"), f);
        }
        for (s, layers) in self.stages.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                layer.visit(&format!("stage{s}.layer{l}"), f);
            }
        }
        f("dustbin.z".to_string(), &self.dustbin);
        f("head.scale".to_string(), &self.head_scale);
    }

    pub fn visit_mut(&mut self, f: &mut ParamFnMut<'_, S>) {
        self.encoder.visit_mut("enc", f);
        for (i, l) in self.init_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("init{i}"), f);
        }
        for (s, layers) in self.stages.iter_mut().enumerate() {
            for (l, layer) in layers.iter_mut().enumerate() {
                layer.visit_mut(&format!("stage{s}.layer{l}"), f);
            }
        }
        f("dustbin.z".to_string(), &mut self.dustbin);
        f("head.scale".to_string(), &mut self.head_scale);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.rows() * m.cols());
        n
    }

    pub fn cast<T: Scalar>(&self) -> ModelWeights<T> {
        ModelWeights {
            encoder: cast_mlp(&self.encoder),
            init_layers: self
                .init_layers
                .iter()
                .map(|l| InitLayerWeights {
                    self_attn: cast_attention(&l.self_attn),
                    cross_attn: cast_attention(&l.cross_attn),
                })
                .collect(),
            stages: self
                .stages
                .iter()
                .map(|layers| layers.iter().map(cast_attention).collect())
                .collect(),
            dustbin: self.dustbin.cast(),
            head_scale: self.head_scale.cast(),
        }
    }
}

fn cast_mlp<S: Scalar, T: Scalar>(m: &MlpWeights<S>) -> MlpWeights<T> {
    MlpWeights {
        hidden: m
            .hidden
            .iter()
            .map(|(l, n)| {
                (
                    LinearNoBias { w: l.w.cast() },
                    NormWeights { gamma: n.gamma.cast(), beta: n.beta.cast() },
                )
            })
            .collect(),
        output: LinearWeights { w: m.output.w.cast(), b: m.output.b.cast() },
    }
}

fn cast_attention<S: Scalar, T: Scalar>(a: &AttentionLayerWeights<S>) -> AttentionLayerWeights<T> {
    AttentionLayerWeights {
        heads: a
            .heads
            .iter()
            .map(|h| HeadWeights {
                q: LinearWeights { w: h.q.w.cast(), b: h.q.b.cast() },
                k: LinearNoBias { w: h.k.w.cast() },
                v: LinearWeights { w: h.v.w.cast(), b: h.v.b.cast() },
            })
            .collect(),
        out: LinearWeights { w: a.out.w.cast(), b: a.out.b.cast() },
        mlp: cast_mlp(&a.mlp),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn visit_names_are_unique_and_shapes_consistent() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            init_depth: 1,
            stage_schedule: vec![2, 4],
            layers_per_stage: 1,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ModelWeights::<f32>::init(&cfg, &mut rng);
        let mut names = std::collections::BTreeSet::new();
        w.visit(&mut |name, m| {
            assert!(m.all_finite());
            assert!(names.insert(name.clone()), "duplicate param name {name}");
        });
        assert!(names.contains("enc.lin0.w"));
        assert!(names.contains("init0.self.h1.q.w"));
        assert!(names.contains("stage1.layer0.mlp.norm0.g"));
        assert!(names.contains("dustbin.z"));
    }

    #[test]
    fn binder_names_match_visit_names() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            init_depth: 1,
            stage_schedule: vec![2],
            layers_per_stage: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ModelWeights::<f32>::init(&cfg, &mut rng);
        let mut g = Graph::<f32>::new(false);
        let mut binder = Binder::default();
        w.encoder.bind(&mut g, &mut binder, "enc");
        for (i, l) in w.init_layers.iter().enumerate() {
            l.self_attn.bind(&mut g, &mut binder, &format!("init{i}.self"));
            l.cross_attn.bind(&mut g, &mut binder, &format!("init{i}.cross"));
        }
        for (s, layers) in w.stages.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                layer.bind(&mut g, &mut binder, &format!("stage{s}.layer{l}"));
            }
        }
        binder.bind(&mut g, "dustbin.z".into(), &w.dustbin);
        let mut visit_names = std::collections::BTreeSet::new();
        w.visit(&mut |name, _| {
            visit_names.insert(name);
        });
        let bound: std::collections::BTreeSet<String> =
            binder.pairs.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(visit_names, bound);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::tiny();
        let a = ModelWeights::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = ModelWeights::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
