//! Standalone evaluations of the numeric building blocks.
//!
//! These validate their inputs and run the same graph kernels the model
//! uses, returning plain tensors.

use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::Tensor;

/// Max-stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.rank().max(1);
    if axis >= rank {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {rank}"
        )));
    }
    let shape = if x.rank() == 0 {
        vec![1]
    } else {
        x.shape().to_vec()
    };
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![0.0; dim];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * dim * inner + j * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data()[at(j)];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out.data_mut()[at(j)] = *b;
            }
        }
    }
    Ok(out)
}

/// Row-wise layer normalization followed by `gamma * x_hat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "gamma/beta widths {}/{} do not match last axis {c}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("eps must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let n = g.layer_norm_rows(xv, eps);
    let mut out = g.value(n).clone();
    for r in 0..out.rows() {
        for ((o, gm), bt) in out.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * gm + bt;
        }
    }
    Ok(out)
}

pub fn mlp_forward(mlp: &Mlp, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    if x.cols() != mlp.spec.input_width() {
        return Err(Error::shape(format!(
            "input width {} does not match MLP input {}",
            x.cols(),
            mlp.spec.input_width()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = mlp.forward(&mut g, params, xv);
    Ok(g.value(y).clone())
}

/// Multi-head cross-attention of `q: [M, C]` over `k, v: [N, C]`.
pub fn cross_attention(
    attn: &MultiHeadAttention,
    params: &ParamStore,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let c = attn.width;
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("cross_attention expects matrices"));
    }
    if q.cols() != c || k.cols() != c || v.cols() != c {
        return Err(Error::shape(format!("all inputs must have width {c}")));
    }
    if k.rows() == 0 {
        return Err(Error::invalid("empty key set"));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("keys and values differ in count"));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let y = attn.dense(&mut g, params, qv, kv, vv);
    Ok(g.value(y).clone())
}

/// Focal loss on softmax mode probabilities, recorded on `g`.
/// `logits` may be `[M]` or `[1, M]`.
pub fn focal_loss_var(g: &mut Graph, logits: Var, target: usize, gamma: f64, alpha: f64) -> Var {
    let m = g.value(logits).len();
    let row = g.reshape(logits, vec![1, m]);
    let logp = g.log_softmax_rows(row);
    let logp_t = g.pick_rows(logp, vec![target]);
    let p_t = g.exp(logp_t);
    let neg = g.scale(p_t, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let w = g.pow(one_minus, gamma);
    let wl = g.mul(w, logp_t);
    let s = g.sum(wl);
    g.scale(s, -alpha)
}

/// `-alpha * (1 - p_t)^gamma * ln(p_t)` for the target mode.
pub fn focal_loss(scores: &Tensor, target: usize, gamma: f64, alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("focal loss needs at least one score"));
    }
    if target >= scores.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} modes",
            scores.len()
        )));
    }
    if gamma < 0.0 {
        return Err(Error::invalid("gamma must be non-negative"));
    }
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = focal_loss_var(&mut g, s, target, gamma, alpha);
    Ok(g.scalar(l))
}

/// Binary cross-entropy on logits, averaged: `softplus(x) - x * y`.
pub fn bce_with_logits_var(g: &mut Graph, logits: Var, targets: &[f64]) -> Var {
    let shape = g.shape(logits).to_vec();
    let y = g.constant(Tensor::new(shape, targets.to_vec()).expect("target count"));
    let sp = g.softplus(logits);
    let xy = g.mul(logits, y);
    let l = g.sub(sp, xy);
    g.mean(l)
}

/// Mean softmax cross-entropy of each row of `logits` against `labels`.
pub fn cross_entropy_rows_var(g: &mut Graph, logits: Var, labels: Vec<usize>) -> Var {
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick_rows(lp, labels);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}
