//! Eager reverse-mode autodiff over [`Matrix`] values.
//!
//! Every forward builder computes its value immediately; `backward` walks the
//! tape in reverse and accumulates gradients. The same graph runs inference
//! (grad disabled, attention probabilities not retained) and training.

use std::rc::Rc;

use crate::error::Result;
use crate::kernels::{block_attention, scaled_dot_attention};
use crate::matrix::{log_softmax, Axis, Mask, Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    Attention { q: Var, k: Var, v: Var, probs: Option<Matrix<S>> },
    BlockAttention { q: Var, k: Var, v: Var, blocks: Rc<Vec<(usize, usize)>>, probs: Option<Vec<Matrix<S>>> },
    ChannelNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64>, xhat: Matrix<S> },
    LayerNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64>, xhat: Matrix<S> },
    RowNormalize { x: Var, norms: Vec<f64> },
    MulScalar { x: Var, s: Var },
    LogSoftmax { x: Var, axis: Axis },
    AddDustbin { x: Var, z: Var },
    MeanNegEntries { x: Var, entries: Rc<Vec<(usize, usize)>> },
    ClusterDist { x: Var, centers: Rc<Matrix<S>>, cid: Rc<Vec<usize>> },
    SumScaled(Vec<(Var, f64)>),
    WeightedSumEntries { x: Var, w: Rc<Matrix<S>> },
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Matrix<S>>>,
    grad_enabled: bool,
    /// Thread cap for the attention kernels; values are thread-count invariant.
    pub threads: usize,
}

impl<S: Scalar> Graph<S> {
    pub fn new(grad_enabled: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled,
            threads: 1,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// Broadcast-add a `1×c` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let bm = self.value(bias);
        assert_eq!(bm.rows(), 1, "bias must be a row vector");
        assert_eq!(bm.cols(), xm.cols(), "bias width mismatch");
        let mut value = xm.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            for (o, &b) in row.iter_mut().zip(bm.row(0)) {
                *o = *o + b;
            }
        }
        self.push(value, Op::AddBias { x, bias })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hcat(&mats);
        self.push(value, Op::HCat(parts.to_vec()))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vcat(&mats);
        self.push(value, Op::VCat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_rows(start, len);
        self.push(value, Op::SliceRows { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let value = self.value(x).gather_rows(&idx);
        self.push(value, Op::GatherRows { x, idx })
    }

    /// Fused scaled dot-product attention; masked entries (if any) are driven
    /// to exactly zero probability pre-softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
        chunks: usize,
    ) -> Result<Var> {
        let res = scaled_dot_attention(
            self.value(q),
            self.value(k),
            self.value(v),
            mask,
            chunks,
            self.grad_enabled,
            self.threads,
        )?;
        Ok(self.push(res.out, Op::Attention { q, k, v, probs: res.probs }))
    }

    /// Block-diagonal attention over pre-permuted rows (shared assignment).
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: Rc<Vec<(usize, usize)>>,
    ) -> Result<Var> {
        let (out, probs) = block_attention(
            self.value(q),
            self.value(k),
            self.value(v),
            &blocks,
            self.grad_enabled,
            self.threads,
        )?;
        Ok(self.push(out, Op::BlockAttention { q, k, v, blocks, probs }))
    }

    /// Per-column standardization over the rows of `x`, then affine transform.
    /// Statistics come from the current matrix (the keypoints of one pair).
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xm = self.value(x);
        let gm = self.value(gamma);
        let bm = self.value(beta);
        let (n, c) = xm.shape();
        assert_eq!((gm.rows(), gm.cols()), (1, c), "gamma shape");
        assert_eq!((bm.rows(), bm.cols()), (1, c), "beta shape");
        let mut mean = vec![0f64; c];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(xm.row(i)) {
                *m += v.into64();
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0f64; c];
        for i in 0..n {
            for j in 0..c {
                let d = xm.at(i, j).into64() - mean[j];
                var[j] += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + EPS).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, c);
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                let xh = (xm.at(i, j).into64() - mean[j]) * inv_std[j];
                *xhat.at_mut(i, j) = S::from64(xh);
                *value.at_mut(i, j) =
                    S::from64(xh * gm.at(0, j).into64() + bm.at(0, j).into64());
            }
        }
        self.push(value, Op::ChannelNorm { x, gamma, beta, inv_std, xhat })
    }

    /// Per-row standardization over the columns of `x`, then affine
    /// transform; row-local, so masked attention stays block independent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xm = self.value(x);
        let gm = self.value(gamma);
        let bm = self.value(beta);
        let (n, c) = xm.shape();
        assert_eq!((gm.rows(), gm.cols()), (1, c), "gamma shape");
        assert_eq!((bm.rows(), bm.cols()), (1, c), "beta shape");
        let mut inv_std = Vec::with_capacity(n);
        let mut xhat = Matrix::zeros(n, c);
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            let row = xm.row(i);
            let mean = row.iter().map(|&v| v.into64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| (v.into64() - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            for j in 0..c {
                let xh = (row[j].into64() - mean) * istd;
                *xhat.at_mut(i, j) = S::from64(xh);
                *value.at_mut(i, j) =
                    S::from64(xh * gm.at(0, j).into64() + bm.at(0, j).into64());
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, inv_std, xhat })
    }

    /// L2-normalizes each row; rows with norm below 1e-12 pass through.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        let mut norms = Vec::with_capacity(n);
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            let row = xm.row(i);
            let norm = row.iter().map(|&v| v.into64().powi(2)).sum::<f64>().sqrt();
            let denom = if norm < 1e-12 { 1.0 } else { norm };
            norms.push(denom);
            for (o, &v) in value.row_mut(i).iter_mut().zip(row) {
                *o = S::from64(v.into64() / denom);
            }
        }
        self.push(value, Op::RowNormalize { x, norms })
    }

    /// Multiplies every entry of `x` by the scalar variable `s` (1×1).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item().into64();
        let value = self.value(x).scale(sv);
        self.push(value, Op::MulScalar { x, s })
    }

    pub fn log_softmax(&mut self, x: Var, axis: Axis) -> Var {
        let value = log_softmax(self.value(x), axis).expect("log_softmax on nonempty matrix");
        self.push(value, Op::LogSoftmax { x, axis })
    }

    /// Appends one row and one column filled with the scalar `z`.
    pub fn add_dustbin(&mut self, x: Var, z: Var) -> Var {
        let xm = self.value(x);
        let zv = self.value(z).item();
        let (n, m) = xm.shape();
        let mut value = Matrix::filled(n + 1, m + 1, zv);
        for i in 0..n {
            value.row_mut(i)[..m].copy_from_slice(xm.row(i));
        }
        self.push(value, Op::AddDustbin { x, z })
    }

    /// Scalar: negative mean of the selected entries of `x`.
    pub fn mean_neg_entries(&mut self, x: Var, entries: Rc<Vec<(usize, usize)>>) -> Var {
        assert!(!entries.is_empty(), "mean_neg_entries needs at least one entry");
        let xm = self.value(x);
        let sum: f64 = entries.iter().map(|&(i, j)| xm.at(i, j).into64()).sum();
        let value = Matrix::scalar(S::from64(-sum / entries.len() as f64));
        self.push(value, Op::MeanNegEntries { x, entries })
    }

    /// Scalar: mean Euclidean distance between each row of `x` and its
    /// assigned center. Centers are constants (no gradient path).
    pub fn cluster_dist(&mut self, x: Var, centers: Rc<Matrix<S>>, cid: Rc<Vec<usize>>) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.rows(), cid.len(), "assignment covers all rows");
        let mut total = 0f64;
        for (i, &c) in cid.iter().enumerate() {
            let mut d2 = 0f64;
            for (a, b) in xm.row(i).iter().zip(centers.row(c)) {
                let d = a.into64() - b.into64();
                d2 += d * d;
            }
            total += d2.sqrt();
        }
        let value = Matrix::scalar(S::from64(total / cid.len() as f64));
        self.push(value, Op::ClusterDist { x, centers, cid })
    }

    /// Scalar: Σ coefᵢ · termᵢ over 1×1 terms.
    pub fn sum_scaled(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut total = 0f64;
        for &(t, c) in terms {
            total += self.value(t).item().into64() * c;
        }
        let value = Matrix::scalar(S::from64(total));
        self.push(value, Op::SumScaled(terms.to_vec()))
    }

    /// Scalar: Σ x_ij · w_ij for a constant weight matrix.
    pub fn weighted_sum_entries(&mut self, x: Var, w: Rc<Matrix<S>>) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.shape(), w.shape(), "weighted_sum_entries shape");
        let total: f64 = xm
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a.into64() * b.into64())
            .sum();
        let value = Matrix::scalar(S::from64(total));
        self.push(value, Op::WeightedSumEntries { x, w })
    }

    /// Reverse pass from a scalar node. Gradients accumulate per node and are
    /// readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) {
        assert!(self.grad_enabled, "backward on a no-grad graph");
        assert_eq!(self.nodes[loss.0].value.shape(), (1, 1), "loss must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Matrix::scalar(S::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.dispatch(id, &g);
            self.grads[id] = Some(g);
        }
    }

    fn accum(&mut self, v: Var, delta: Matrix<S>) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn dispatch(&mut self, id: usize, g: &Matrix<S>) {
        // Ops are matched by moving cheap copies of their metadata out first,
        // so `self` can be re-borrowed for accumulation.
        enum Step<S> {
            None,
            One(Var, Matrix<S>),
            Two((Var, Matrix<S>), (Var, Matrix<S>)),
            Many(Vec<(Var, Matrix<S>)>),
        }
        let step = match &self.nodes[id].op {
            Op::Leaf => Step::None,
            Op::Add(a, b) => Step::Two((*a, g.clone()), (*b, g.clone())),
            Op::Scale(a, c) => Step::One(*a, g.scale(*c)),
            Op::AddBias { x, bias } => {
                let mut db = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &gv) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o = *o + gv;
                    }
                }
                Step::Two((*x, g.clone()), (*bias, db))
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.matmul_nt(self.value(b));
                let db = self.value(a).matmul_tn(g);
                Step::Two((a, da), (b, db))
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.matmul(self.value(b));
                let db = g.matmul_tn(self.value(a));
                Step::Two((a, da), (b, db))
            }
            Op::Relu(a) => {
                let a = *a;
                let mut da = g.clone();
                let av = self.value(a);
                for (d, &x) in da.data_mut().iter_mut().zip(av.data()) {
                    if x <= S::zero() {
                        *d = S::zero();
                    }
                }
                Step::One(a, da)
            }
            Op::HCat(parts) => {
                let parts = parts.clone();
                let mut steps = Vec::with_capacity(parts.len());
                let mut off = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Matrix::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    off += w;
                    steps.push((p, dp));
                }
                Step::Many(steps)
            }
            Op::VCat(parts) => {
                let parts = parts.clone();
                let mut steps = Vec::with_capacity(parts.len());
                let mut off = 0;
                for p in parts {
                    let r = self.value(p).rows();
                    steps.push((p, g.slice_rows(off, r)));
                    off += r;
                }
                Step::Many(steps)
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let mut dx = Matrix::zeros(self.value(x).rows(), self.value(x).cols());
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                Step::One(x, dx)
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let mut dx = Matrix::zeros(self.value(x).rows(), self.value(x).cols());
                for (r, &i) in idx.iter().enumerate() {
                    let row = dx.row_mut(i);
                    for (o, &gv) in row.iter_mut().zip(g.row(r)) {
                        *o = *o + gv;
                    }
                }
                Step::One(x, dx)
            }
            Op::Attention { q, k, v, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let p = probs.as_ref().expect("probs retained in grad mode");
                let (dq, dk, dv) = attention_backward(p, g, self.value(q), self.value(k), self.value(v));
                Step::Many(vec![(q, dq), (k, dk), (v, dv)])
            }
            Op::BlockAttention { q, k, v, blocks, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let blocks = blocks.clone();
                let ps = probs.as_ref().expect("probs retained in grad mode");
                let qv = self.value(q);
                let kv = self.value(k);
                let vv = self.value(v);
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                let mut pi = 0;
                for &(start, len) in blocks.iter() {
                    if len == 0 {
                        continue;
                    }
                    let gb = g.slice_rows(start, len);
                    let (dqb, dkb, dvb) = attention_backward(
                        &ps[pi],
                        &gb,
                        &qv.slice_rows(start, len),
                        &kv.slice_rows(start, len),
                        &vv.slice_rows(start, len),
                    );
                    pi += 1;
                    for r in 0..len {
                        dq.row_mut(start + r).copy_from_slice(dqb.row(r));
                        dk.row_mut(start + r).copy_from_slice(dkb.row(r));
                        dv.row_mut(start + r).copy_from_slice(dvb.row(r));
                    }
                }
                Step::Many(vec![(q, dq), (k, dk), (v, dv)])
            }
            Op::ChannelNorm { x, gamma, beta, inv_std, xhat } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c) = xhat.shape();
                let gm = self.value(gamma);
                let mut dgamma64 = vec![0f64; c];
                let mut dbeta64 = vec![0f64; c];
                let mut sum_dxhat = vec![0f64; c];
                let mut sum_dxhat_xhat = vec![0f64; c];
                for i in 0..n {
                    for j in 0..c {
                        let gv = g.at(i, j).into64();
                        let xh = xhat.at(i, j).into64();
                        dgamma64[j] += gv * xh;
                        dbeta64[j] += gv;
                        let dxh = gv * gm.at(0, j).into64();
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xh;
                    }
                }
                let dgamma = Matrix::from_vec(1, c, dgamma64.into_iter().map(S::from64).collect());
                let dbeta = Matrix::from_vec(1, c, dbeta64.into_iter().map(S::from64).collect());
                let mut dx = Matrix::zeros(n, c);
                let nf = n as f64;
                for i in 0..n {
                    for j in 0..c {
                        let dxh = g.at(i, j).into64() * gm.at(0, j).into64();
                        let xh = xhat.at(i, j).into64();
                        let v = inv_std[j] / nf
                            * (nf * dxh - sum_dxhat[j] - xh * sum_dxhat_xhat[j]);
                        *dx.at_mut(i, j) = S::from64(v);
                    }
                }
                Step::Many(vec![(x, dx), (gamma, dgamma), (beta, dbeta)])
            }
            Op::LayerNorm { x, gamma, beta, inv_std, xhat } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c) = xhat.shape();
                let gm = self.value(gamma);
                let mut dgamma64 = vec![0f64; c];
                let mut dbeta64 = vec![0f64; c];
                let mut dx = Matrix::zeros(n, c);
                let cf = c as f64;
                for i in 0..n {
                    let mut sum_dxhat = 0f64;
                    let mut sum_dxhat_xhat = 0f64;
                    for j in 0..c {
                        let gv = g.at(i, j).into64();
                        let xh = xhat.at(i, j).into64();
                        dgamma64[j] += gv * xh;
                        dbeta64[j] += gv;
                        let dxh = gv * gm.at(0, j).into64();
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                    }
                    for j in 0..c {
                        let dxh = g.at(i, j).into64() * gm.at(0, j).into64();
                        let xh = xhat.at(i, j).into64();
                        let v = inv_std[i] / cf * (cf * dxh - sum_dxhat - xh * sum_dxhat_xhat);
                        *dx.at_mut(i, j) = S::from64(v);
                    }
                }
                let dgamma = Matrix::from_vec(1, c, dgamma64.into_iter().map(S::from64).collect());
                let dbeta = Matrix::from_vec(1, c, dbeta64.into_iter().map(S::from64).collect());
                Step::Many(vec![(x, dx), (gamma, dgamma), (beta, dbeta)])
            }
            Op::RowNormalize { x, norms } => {
                let x = *x;
                let out = &self.nodes[id].value;
                let (n, c) = out.shape();
                let mut dx = Matrix::zeros(n, c);
                for i in 0..n {
                    let xhat = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = xhat
                        .iter()
                        .zip(gi)
                        .map(|(&a, &b)| a.into64() * b.into64())
                        .sum();
                    for j in 0..c {
                        let v = (gi[j].into64() - xhat[j].into64() * dot) / norms[i];
                        *dx.at_mut(i, j) = S::from64(v);
                    }
                }
                Step::One(x, dx)
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.value(s).item().into64();
                let dx = g.scale(sv);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&a, &b)| a.into64() * b.into64())
                    .sum();
                Step::Two((x, dx), (s, Matrix::scalar(S::from64(ds))))
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let out = &self.nodes[id].value;
                let (n, c) = out.shape();
                let mut dx = Matrix::zeros(n, c);
                match axis {
                    Axis::Rows => {
                        for i in 0..n {
                            let gsum: f64 = g.row(i).iter().map(|&v| v.into64()).sum();
                            for j in 0..c {
                                let p = out.at(i, j).into64().exp();
                                *dx.at_mut(i, j) = S::from64(g.at(i, j).into64() - p * gsum);
                            }
                        }
                    }
                    Axis::Cols => {
                        for j in 0..c {
                            let mut gsum = 0f64;
                            for i in 0..n {
                                gsum += g.at(i, j).into64();
                            }
                            for i in 0..n {
                                let p = out.at(i, j).into64().exp();
                                *dx.at_mut(i, j) = S::from64(g.at(i, j).into64() - p * gsum);
                            }
                        }
                    }
                }
                Step::One(x, dx)
            }
            Op::AddDustbin { x, z } => {
                let (x, z) = (*x, *z);
                let (n1, m1) = g.shape();
                let (n, m) = (n1 - 1, m1 - 1);
                let mut dx = Matrix::zeros(n, m);
                for i in 0..n {
                    dx.row_mut(i).copy_from_slice(&g.row(i)[..m]);
                }
                let mut dz = 0f64;
                for i in 0..n1 {
                    dz += g.at(i, m).into64();
                }
                for j in 0..m {
                    dz += g.at(n, j).into64();
                }
                Step::Two((x, dx), (z, Matrix::scalar(S::from64(dz))))
            }
            Op::MeanNegEntries { x, entries } => {
                let (x, entries) = (*x, entries.clone());
                let gv = g.item().into64();
                let xm = self.value(x);
                let mut dx64 = vec![0f64; xm.rows() * xm.cols()];
                let w = -gv / entries.len() as f64;
                let cols = xm.cols();
                for &(i, j) in entries.iter() {
                    dx64[i * cols + j] += w;
                }
                let dx = Matrix::from_vec(
                    xm.rows(),
                    cols,
                    dx64.into_iter().map(S::from64).collect(),
                );
                Step::One(x, dx)
            }
            Op::ClusterDist { x, centers, cid } => {
                let (x, centers, cid) = (*x, centers.clone(), cid.clone());
                let gv = g.item().into64();
                let xm = self.value(x);
                let n = cid.len() as f64;
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for (i, &c) in cid.iter().enumerate() {
                    let mut d2 = 0f64;
                    for (a, b) in xm.row(i).iter().zip(centers.row(c)) {
                        let d = a.into64() - b.into64();
                        d2 += d * d;
                    }
                    let dist = d2.sqrt();
                    if dist < 1e-12 {
                        continue;
                    }
                    let coef = gv / (n * dist);
                    for (j, (a, b)) in xm.row(i).iter().zip(centers.row(c)).enumerate() {
                        *dx.at_mut(i, j) = S::from64(coef * (a.into64() - b.into64()));
                    }
                }
                Step::One(x, dx)
            }
            Op::SumScaled(terms) => {
                let terms = terms.clone();
                let gv = g.item().into64();
                Step::Many(
                    terms
                        .into_iter()
                        .map(|(t, c)| (t, Matrix::scalar(S::from64(gv * c))))
                        .collect(),
                )
            }
            Op::WeightedSumEntries { x, w } => {
                let (x, w) = (*x, w.clone());
                let gv = g.item().into64();
                Step::One(x, w.scale(gv))
            }
        };
        match step {
            Step::None => {}
            Step::One(v, d) => self.accum(v, d),
            Step::Two((v1, d1), (v2, d2)) => {
                self.accum(v1, d1);
                self.accum(v2, d2);
            }
            Step::Many(steps) => {
                for (v, d) in steps {
                    self.accum(v, d);
                }
            }
        }
    }
}

/// Shared attention backward: given post-softmax probabilities `p` and the
/// output gradient `g`, returns (dq, dk, dv).
fn attention_backward<S: Scalar>(
    p: &Matrix<S>,
    g: &Matrix<S>,
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
) -> (Matrix<S>, Matrix<S>, Matrix<S>) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = p.matmul_tn(g);
    let dp = g.matmul_nt(v);
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let rowdot: f64 = dp
            .row(i)
            .iter()
            .zip(p.row(i))
            .map(|(&a, &b)| a.into64() * b.into64())
            .sum();
        for j in 0..p.cols() {
            let pv = p.at(i, j).into64();
            *ds.at_mut(i, j) = S::from64(pv * (dp.at(i, j).into64() - rowdot) * scale);
        }
    }
    let dq = ds.matmul(k);
    let dk = ds.matmul_tn(q);
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randmat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Checks analytic gradients of a graph builder against central
    /// differences for every input leaf.
    fn check_builder(
        inputs: &[Matrix<f64>],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::<f64>::new(true);
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss);
        for (pi, input) in inputs.iter().enumerate() {
            let x: Vec<f64> = input.data().to_vec();
            let analytic: Vec<f64> = g
                .grad(vars[pi])
                .map(|m| m.data().to_vec())
                .unwrap_or_else(|| vec![0.0; x.len()]);
            let f = |xs: &[f64]| {
                let mut g2 = Graph::<f64>::new(false);
                let vars2: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        if i == pi {
                            g2.leaf(Matrix::from_vec(m.rows(), m.cols(), xs.to_vec()))
                        } else {
                            g2.leaf(m.clone())
                        }
                    })
                    .collect();
                let l = build(&mut g2, &vars2);
                g2.value(l).item()
            };
            let err = grad_check(f, &x, &analytic, 1e-5).unwrap();
            assert!(err < tol, "input {pi}: grad error {err}");
        }
    }

    fn scalarize(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let xm = g.value(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = randmat(xm.rows(), xm.cols(), &mut rng);
        g.weighted_sum_entries(x, Rc::new(w))
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![randmat(3, 4, &mut rng), randmat(4, 5, &mut rng), randmat(2, 5, &mut rng)];
        check_builder(
            &inputs,
            |g, v| {
                let ab = g.matmul(v[0], v[1]);
                let c = g.matmul_nt(ab, v[2]);
                scalarize(g, c, 7)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_bias_relu_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            randmat(5, 3, &mut rng),
            randmat(1, 3, &mut rng),
            randmat(1, 3, &mut rng),
            randmat(1, 3, &mut rng),
        ];
        check_builder(
            &inputs,
            |g, v| {
                let xb = g.add_bias(v[0], v[1]);
                let r = g.relu(xb);
                let n = g.channel_norm(r, v[2], v[3]);
                scalarize(g, n, 8)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = vec![randmat(4, 6, &mut rng), randmat(1, 6, &mut rng), randmat(1, 6, &mut rng)];
        check_builder(
            &inputs,
            |g, v| {
                let n = g.layer_norm(v[0], v[1], v[2]);
                scalarize(g, n, 22)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_cat_slice_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![randmat(4, 2, &mut rng), randmat(3, 2, &mut rng)];
        check_builder(
            &inputs,
            |g, v| {
                let u = g.vcat(&[v[0], v[1]]);
                let gathered = g.gather_rows(u, Rc::new(vec![6, 0, 0, 3, 2]));
                let h = g.hcat(&[gathered, gathered]);
                let s = g.slice_rows(h, 1, 3);
                scalarize(g, s, 9)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_attention_dense_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![randmat(4, 3, &mut rng), randmat(5, 3, &mut rng), randmat(5, 3, &mut rng)];
        check_builder(
            &inputs,
            |g, v| {
                let a = g.attention(v[0], v[1], v[2], None, 1).unwrap();
                scalarize(g, a, 10)
            },
            1e-6,
        );
        let mask = Mask::from_fn(4, 5, |i, j| (i + j) % 3 != 0 || j == 0);
        check_builder(
            &inputs,
            move |g, v| {
                let a = g.attention(v[0], v[1], v[2], Some(&mask), 2).unwrap();
                scalarize(g, a, 11)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_block_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![randmat(7, 3, &mut rng), randmat(7, 3, &mut rng), randmat(7, 4, &mut rng)];
        check_builder(
            &inputs,
            |g, v| {
                let blocks = Rc::new(vec![(0usize, 3usize), (3, 1), (4, 3)]);
                let a = g.block_attention(v[0], v[1], v[2], blocks).unwrap();
                scalarize(g, a, 12)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_row_normalize_and_scalar_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let inputs = vec![randmat(5, 4, &mut rng), Matrix::scalar(1.7)];
        check_builder(
            &inputs,
            |g, v| {
                let n = g.row_normalize(v[0]);
                let s2 = g.mul_scalar(v[1], v[1]);
                let scaled = g.mul_scalar(n, s2);
                scalarize(g, scaled, 32)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_matcher_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![randmat(3, 4, &mut rng), Matrix::scalar(0.3)];
        check_builder(
            &inputs,
            |g, v| {
                let with_bin = g.add_dustbin(v[0], v[1]);
                let lr = g.log_softmax(with_bin, Axis::Rows);
                let lc = g.log_softmax(with_bin, Axis::Cols);
                let p = g.add(lr, lc);
                let m1 = g.mean_neg_entries(p, Rc::new(vec![(0, 0), (1, 2), (2, 4)]));
                let m2 = g.mean_neg_entries(p, Rc::new(vec![(3, 1)]));
                g.sum_scaled(&[(m1, 1.0), (m2, 0.5)])
            },
            1e-6,
        );
    }

    #[test]
    fn grad_cluster_dist() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers = Rc::new(randmat(2, 3, &mut rng));
        let inputs = vec![randmat(5, 3, &mut rng)];
        check_builder(
            &inputs,
            move |g, v| {
                let cid = Rc::new(vec![0, 1, 0, 1, 1]);
                g.cluster_dist(v[0], centers.clone(), cid)
            },
            1e-6,
        );
    }

    #[test]
    fn centers_receive_no_gradient() {
        // The EMA path is gradient-free: centers enter the graph only as
        // constants, so no Var ever carries their gradient.
        let mut g = Graph::<f64>::new(true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randmat(4, 3, &mut rng);
        let centers = Rc::new(randmat(2, 3, &mut rng));
        let xv = g.leaf(x);
        let loss = g.cluster_dist(xv, centers, Rc::new(vec![0, 0, 1, 1]));
        g.backward(loss);
        assert!(g.grad(xv).is_some());
        assert_eq!(g.nodes.len(), 2);
    }
}
