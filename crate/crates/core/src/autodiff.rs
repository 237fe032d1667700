//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node
//! list visits every node after all of its consumers. Each forward pass owns
//! its graph; parameters are copied in once per graph through
//! [`Graph::param`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Pow(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    SliceCols(Var, usize),
    Transpose(Var),
    PickRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    RowNorm(Var),
    GroupScores {
        q: Var,
        k: Var,
        offsets: Arc<[usize]>,
        heads: usize,
        scale: f64,
    },
    SegmentSoftmax {
        s: Var,
        offsets: Arc<[usize]>,
    },
    SegmentWeightedSum {
        w: Var,
        v: Var,
        offsets: Arc<[usize]>,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn segments(offsets: &[usize]) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
    offsets.windows(2).enumerate().map(|(g, w)| (g, w[0]..w[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn map_shape(shape: &[usize], cols: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(last) => *last = cols,
        None => s.push(cols),
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a parameter leaf. Repeated calls with the same id return the
    /// same node, so weights shared across steps accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(bv.rank(), 2, "matmul rhs must be a matrix");
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(
            bv.shape()[0],
            k,
            "matmul inner dims {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let shape = map_shape(av.shape(), n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(shape, out).unwrap(), Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let c = xv.cols();
        assert_eq!(bv.len(), c, "bias width");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddBias(x, b), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * s);
        self.unary(x, out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v + s);
        self.unary(x, out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.max(0.0));
        self.unary(x, out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0]
            .value
            .map(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()));
        self.unary(x, out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(sigmoid);
        self.unary(x, out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(f64::tanh);
        self.unary(x, out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(f64::exp);
        self.unary(x, out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(f64::ln);
        self.unary(x, out, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(f64::abs);
        self.unary(x, out, Op::Abs(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(softplus);
        self.unary(x, out, Op::Softplus(x))
    }

    /// Elementwise `x^p` for `x >= 0`.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.powf(p));
        self.unary(x, out, Op::Pow(x, p))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.unary(x, out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.unary(x, out, Op::LogSoftmaxRows(x))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        let c = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.unary(x, out, Op::LayerNorm { x, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.rows(), rows, "concat_cols row counts");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let shape = map_shape(self.nodes[parts[0].0].value.shape(), total);
        let ng = self.ng(parts);
        self.push(
            Tensor::new(shape, data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), cols, "concat_rows widths");
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let ng = self.ng(parts);
        self.push(
            Tensor::new(vec![rows, cols], data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx: Arc<[usize]> = idx.into();
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data).unwrap();
        self.unary(x, out, Op::GatherRows(x, idx))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(start + width <= xv.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let shape = map_shape(xv.shape(), width);
        let out = Tensor::new(shape, data).unwrap();
        self.unary(x, out, Op::SliceCols(x, start))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data).unwrap();
        self.unary(x, out, Op::Transpose(x))
    }

    /// Picks element `idx[r]` from each row `r`, giving a rank-1 tensor.
    pub fn pick_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(idx.len(), xv.rows(), "pick_rows index count");
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| xv.at2(r, i)).collect();
        let out = Tensor::new(vec![data.len()], data).unwrap();
        self.unary(x, out, Op::PickRows(x, idx))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.unary(x, Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.nodes[x.0]
            .value
            .clone()
            .reshape(shape)
            .expect("reshape");
        self.unary(x, out, Op::Reshape(x))
    }

    /// Euclidean norm of each row, shape `[rows, 1]`. The subgradient at a
    /// zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = (0..xv.rows())
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(vec![data.len(), 1], data).unwrap();
        self.unary(x, out, Op::RowNorm(x))
    }

    /// Scaled per-head dot products between query `g` and each key of its
    /// segment `offsets[g]..offsets[g+1]`. Output is `[n_keys, heads]`.
    pub fn group_scores(
        &mut self,
        q: Var,
        k: Var,
        offsets: Arc<[usize]>,
        heads: usize,
        scale: f64,
    ) -> Var {
        let (qv, kv) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
        let c = qv.cols();
        assert_eq!(kv.cols(), c, "group_scores widths");
        assert_eq!(c % heads, 0, "heads must divide width");
        assert_eq!(offsets.len(), qv.rows() + 1, "one segment per query");
        assert_eq!(*offsets.last().unwrap(), kv.rows(), "segments cover keys");
        let d = c / heads;
        let mut out = vec![0.0; kv.rows() * heads];
        for (g, keys) in segments(&offsets) {
            let qr = qv.row(g);
            for j in keys {
                let kr = kv.row(j);
                for h in 0..heads {
                    let s: f64 = (h * d..(h + 1) * d).map(|i| qr[i] * kr[i]).sum();
                    out[j * heads + h] = s * scale;
                }
            }
        }
        let t = Tensor::new(vec![kv.rows(), heads], out).unwrap();
        let ng = self.ng(&[q, k]);
        self.push(
            t,
            Op::GroupScores {
                q,
                k,
                offsets,
                heads,
                scale,
            },
            ng,
        )
    }

    /// Softmax down each column within each segment of rows.
    pub fn segment_softmax(&mut self, s: Var, offsets: Arc<[usize]>) -> Var {
        let mut out = self.nodes[s.0].value.clone();
        let h = out.cols();
        let mut buf = Vec::new();
        for (_, rows) in segments(&offsets) {
            for col in 0..h {
                buf.clear();
                buf.extend(rows.clone().map(|j| out.at2(j, col)));
                softmax_in_place(&mut buf);
                for (j, p) in rows.clone().zip(&buf) {
                    out.data_mut()[j * h + col] = *p;
                }
            }
        }
        self.unary(s, out, Op::SegmentSoftmax { s, offsets })
    }

    /// `out[g, i] = sum_{j in segment g} w[j, head(i)] * v[j, i]`; empty
    /// segments give zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        w: Var,
        v: Var,
        offsets: Arc<[usize]>,
        heads: usize,
    ) -> Var {
        let (wv, vv) = (&self.nodes[w.0].value, &self.nodes[v.0].value);
        let c = vv.cols();
        assert_eq!(wv.cols(), heads);
        assert_eq!(wv.rows(), vv.rows());
        let d = c / heads;
        let groups = offsets.len() - 1;
        let mut out = vec![0.0; groups * c];
        for (g, rows) in segments(&offsets) {
            let o = &mut out[g * c..(g + 1) * c];
            for j in rows {
                let vr = vv.row(j);
                let wr = wv.row(j);
                for (i, oi) in o.iter_mut().enumerate() {
                    *oi += wr[i / d] * vr[i];
                }
            }
        }
        let t = Tensor::new(vec![groups, c], out).unwrap();
        let ng = self.ng(&[w, v]);
        self.push(
            t,
            Op::SegmentWeightedSum {
                w,
                v,
                offsets,
                heads,
            },
            ng,
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut keep: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            keep[i] = Some(g);
        }
        Gradients { grads: keep }
    }

    /// Gradients of every parameter inserted into this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let shape = self.nodes[v.0].value.shape().to_vec();
                let data = grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                (id, Tensor::new(shape, data).unwrap())
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        // Accumulate into a parent's gradient buffer, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |da| {
                    gemm(m, n, k, g, false, bv.data(), true, 1.0, da)
                });
                acc(*b, &mut |db| {
                    gemm(k, m, n, av.data(), true, g, false, 1.0, db)
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let c = val(*b).len();
                acc(*b, &mut |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for ((o, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * s)
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for ((o, gi), &v) in d.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((o, gi), yi) in d.iter_mut().zip(g).zip(y.data()) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((o, gi), yi) in d.iter_mut().zip(g).zip(y.data()) {
                    *o += gi * (1.0 - yi * yi);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((o, gi), yi) in d.iter_mut().zip(g).zip(y.data()) {
                    *o += gi * yi;
                }
            }),
            Op::Log(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        } else if *xi < 0.0 {
                            *o -= gi;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        *o += gi * sigmoid(*xi);
                    }
                });
            }
            Op::Pow(x, p) => {
                let xv = val(*x).data();
                let p = *p;
                acc(*x, &mut |d| {
                    for ((o, gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        let dydx = if p == 0.0 {
                            0.0
                        } else if xi == 0.0 {
                            if p > 1.0 {
                                0.0
                            } else if p == 1.0 {
                                1.0
                            } else {
                                f64::INFINITY
                            }
                        } else {
                            p * xi.powf(p - 1.0)
                        };
                        *o += gi * dydx;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = y.cols();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let gs: f64 = gr.iter().sum();
                        for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += gi - yi.exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let cf = c as f64;
                acc(*x, &mut |d| {
                    for (((dr, gr), yr), is) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.data().chunks(c))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().sum::<f64>() / cf;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += is * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, &mut |d| {
                        for (dr, gr) in d.chunks_mut(w.max(1)).zip(g.chunks(total)) {
                            add_into(dr, &gr[start..start + w]);
                        }
                    });
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, &mut |d| add_into(d, &g[start..start + n]));
                    start += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = y.cols();
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (w, c) = (y.cols(), val(*x).cols());
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut dr[*start..start + w], gr);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::PickRows(x, idx) => {
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * c + i] += g[r];
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let c = xv.cols();
                acc(*x, &mut |d| {
                    for (r, (dr, xr)) in d.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                        let n = y.data()[r];
                        if n > 0.0 {
                            for (o, xi) in dr.iter_mut().zip(xr) {
                                *o += g[r] * xi / n;
                            }
                        }
                    }
                });
            }
            Op::GroupScores {
                q,
                k,
                offsets,
                heads,
                scale,
            } => {
                let (qv, kv) = (val(*q), val(*k));
                let c = qv.cols();
                let d = c / heads;
                acc(*q, &mut |dq| {
                    for (gi, keys) in segments(offsets) {
                        for j in keys {
                            let kr = kv.row(j);
                            for h in 0..*heads {
                                let gs = g[j * heads + h] * scale;
                                for i in h * d..(h + 1) * d {
                                    dq[gi * c + i] += gs * kr[i];
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |dk| {
                    for (gi, keys) in segments(offsets) {
                        let qr = qv.row(gi);
                        for j in keys {
                            for h in 0..*heads {
                                let gs = g[j * heads + h] * scale;
                                for i in h * d..(h + 1) * d {
                                    dk[j * c + i] += gs * qr[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::SegmentSoftmax { s, offsets } => {
                let h = y.cols();
                acc(*s, &mut |ds| {
                    for (_, rows) in segments(offsets) {
                        for col in 0..h {
                            let dot: f64 = rows
                                .clone()
                                .map(|j| g[j * h + col] * y.data()[j * h + col])
                                .sum();
                            for j in rows.clone() {
                                let p = y.data()[j * h + col];
                                ds[j * h + col] += p * (g[j * h + col] - dot);
                            }
                        }
                    }
                });
            }
            Op::SegmentWeightedSum {
                w,
                v,
                offsets,
                heads,
            } => {
                let (wv, vv) = (val(*w), val(*v));
                let c = vv.cols();
                let d = c / heads;
                acc(*w, &mut |dw| {
                    for (gi, rows) in segments(offsets) {
                        let go = &g[gi * c..(gi + 1) * c];
                        for j in rows {
                            let vr = vv.row(j);
                            for h in 0..*heads {
                                let s: f64 = (h * d..(h + 1) * d).map(|i| go[i] * vr[i]).sum();
                                dw[j * heads + h] += s;
                            }
                        }
                    }
                });
                acc(*v, &mut |dv| {
                    for (gi, rows) in segments(offsets) {
                        let go = &g[gi * c..(gi + 1) * c];
                        for j in rows {
                            let wr = wv.row(j);
                            for i in 0..c {
                                dv[j * c + i] += wr[i / d] * go[i];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    xs.iter_mut().for_each(|v| *v /= sum);
}
