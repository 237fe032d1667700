//! Named parameters and the small layer vocabulary the model is built from.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::invalid(
                "an MLP needs at least input and output widths",
            ));
        }
        if layer_widths.contains(&0) {
            return Err(Error::invalid("MLP widths must be positive"));
        }
        Ok(Self {
            layer_widths,
            activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearInit {
    /// Uniform Glorot weights, zero bias.
    Xavier,
    /// All weights and biases zero.
    Zero,
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_width: usize,
        out_width: usize,
        init: LinearInit,
    ) -> Result<Self> {
        let w = match init {
            LinearInit::Zero => Tensor::zeros(&[in_width, out_width]),
            LinearInit::Xavier => {
                let bound = (6.0 / (in_width + out_width) as f64).sqrt();
                let data = (0..in_width * out_width)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::new(vec![in_width, out_width], data)?
            }
        };
        Ok(Self {
            w: store.add(format!("{name}.w"), w)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out_width]))?,
            in_width,
            out_width,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Builds `name.l0 .. name.l{n-1}`. With `zero_last` the final layer
    /// starts at zero so the network initially outputs exactly zero.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: MlpSpec,
        zero_last: bool,
    ) -> Result<Self> {
        let n = spec.layer_widths.len() - 1;
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if zero_last && i + 1 == n {
                    LinearInit::Zero
                } else {
                    LinearInit::Xavier
                };
                Linear::new(store, rng, &format!("{name}.l{i}"), w[0], w[1], init)
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < n {
                h = self.spec.activation.apply(g, h);
            }
        }
        h
    }
}

/// Broadcasts a `[c]` vector to `[rows, c]` inside the graph.
pub fn broadcast_row(g: &mut Graph, v: Var, rows: usize) -> Var {
    let c = g.value(v).len();
    let v2 = g.reshape(v, vec![1, c]);
    g.gather_rows(v2, vec![0; rows])
}

/// Layer normalization with a learned per-channel affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let rows = g.value(x).rows();
        let n = g.layer_norm_rows(x, self.eps);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let gb = broadcast_row(g, gamma, rows);
        let scaled = g.mul(n, gb);
        g.add_bias(scaled, beta)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(
                store,
                rng,
                &format!("{name}.q"),
                width,
                width,
                LinearInit::Xavier,
            )?,
            k: Linear::new(
                store,
                rng,
                &format!("{name}.k"),
                width,
                width,
                LinearInit::Xavier,
            )?,
            v: Linear::new(
                store,
                rng,
                &format!("{name}.v"),
                width,
                width,
                LinearInit::Xavier,
            )?,
            out: Linear::new(
                store,
                rng,
                &format!("{name}.out"),
                width,
                width,
                LinearInit::Xavier,
            )?,
            heads,
            width,
        })
    }

    fn scale(&self) -> f64 {
        1.0 / ((self.width / self.heads) as f64).sqrt()
    }

    /// Every query attends to all rows of `k_in` / `v_in`.
    pub fn dense(&self, g: &mut Graph, store: &ParamStore, q_in: Var, k_in: Var, v_in: Var) -> Var {
        let q = self.q.forward(g, store, q_in);
        let k = self.k.forward(g, store, k_in);
        let v = self.v.forward(g, store, v_in);
        let d = self.width / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d, d);
            let kh = g.slice_cols(k, h * d, d);
            let vh = g.slice_cols(v, h * d, d);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, self.scale());
            let p = g.softmax_rows(s);
            heads.push(g.matmul(p, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.out.forward(g, store, cat)
    }

    /// Projects a key/value source once so it can be gathered many times.
    pub fn project_kv(&self, g: &mut Graph, store: &ParamStore, kv: Var) -> (Var, Var) {
        (self.k.forward(g, store, kv), self.v.forward(g, store, kv))
    }

    /// Query `i` attends only to projected key rows
    /// `offsets[i]..offsets[i+1]` of `k` / `v`. Every segment must be
    /// non-empty.
    pub fn grouped(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        k: Var,
        v: Var,
        offsets: Arc<[usize]>,
    ) -> Var {
        debug_assert!(offsets.windows(2).all(|w| w[1] > w[0]));
        let q = self.q.forward(g, store, q_in);
        let s = g.group_scores(q, k, offsets.clone(), self.heads, self.scale());
        let p = g.segment_softmax(s, offsets.clone());
        let o = g.segment_weighted_sum(p, v, offsets, self.heads);
        self.out.forward(g, store, o)
    }
}
