//! Planning-aware perception: trajectory queries attend to image and BEV
//! features gathered around projected guiding points, then to agent slots
//! through relative-distance features.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, LayerNorm, Linear, LinearInit, Mlp, MlpSpec, MultiHeadAttention, ParamId,
    ParamStore,
};
use crate::raster::{CameraConfig, RasterConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub channels: usize,
    pub heads: usize,
    pub bev_window: usize,
    pub img_window: usize,
    /// Width of the relative-distance encoding; `None` means `channels / 4`.
    pub disrel_width: Option<usize>,
    pub activation: Activation,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 4,
            bev_window: 2,
            img_window: 4,
            disrel_width: None,
            activation: Activation::Gelu,
        }
    }
}

impl PerceptionConfig {
    pub fn disrel(&self) -> usize {
        self.disrel_width.unwrap_or(self.channels / 4).max(1)
    }
}

/// Row `t` of every mode: `trajs[m][t]`.
pub fn guiding_points_at(trajs: &[Vec<[f64; 3]>], t: usize) -> Result<Vec<[f64; 3]>> {
    trajs
        .iter()
        .map(|tr| {
            tr.get(t)
                .copied()
                .ok_or_else(|| Error::invalid(format!("step {t} outside horizon {}", tr.len())))
        })
        .collect()
}

fn square_window(center: [f64; 2], rows: usize, cols: usize, w: usize, out: &mut Vec<usize>) {
    let (r0, c0) = (center[0].floor(), center[1].floor());
    if !r0.is_finite() || !c0.is_finite() {
        return;
    }
    let (r0, c0, w) = (r0 as i64, c0 as i64, w as i64);
    for r in (r0 - w).max(0)..=(r0 + w).min(rows as i64 - 1) {
        for c in (c0 - w).max(0)..=(c0 + w).min(cols as i64 - 1) {
            out.push(r as usize * cols + c as usize);
        }
    }
}

/// Where a set of guiding points reads from a feature grid.
#[derive(Clone, Copy, Debug)]
pub enum GridTarget<'a> {
    Bev(&'a RasterConfig),
    Camera(&'a CameraConfig),
}

impl GridTarget<'_> {
    pub fn cells(&self) -> usize {
        match self {
            GridTarget::Bev(r) => r.cells(),
            GridTarget::Camera(c) => c.pixels(),
        }
    }

    fn collect(&self, p: [f64; 3], w: usize, out: &mut Vec<usize>) {
        match self {
            GridTarget::Bev(r) => {
                square_window(r.world_to_grid([p[0], p[1]]), r.rows, r.cols, w, out)
            }
            GridTarget::Camera(c) => {
                if let Some(px) = c.project([p[0], p[1]], 0.0) {
                    square_window(px, c.height_px, c.width_px, w, out);
                }
            }
        }
    }
}

/// Gather plan: per mode, the sorted union of the windows around its points.
/// A mode with no in-bounds key reads the null row (index `cells`).
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    pub rows: Vec<usize>,
    pub offsets: Arc<[usize]>,
}

pub fn gather_windows(points: &[Vec<[f64; 3]>], target: GridTarget, w: usize) -> Windows {
    let null = target.cells();
    let mut rows = Vec::new();
    let mut offsets = vec![0];
    let mut buf = Vec::new();
    for mode_points in points {
        buf.clear();
        for p in mode_points {
            target.collect(*p, w, &mut buf);
        }
        buf.sort_unstable();
        buf.dedup();
        if buf.is_empty() {
            buf.push(null);
        }
        rows.extend_from_slice(&buf);
        offsets.push(rows.len());
    }
    Windows {
        rows,
        offsets: offsets.into(),
    }
}

/// Projected keys and values of a feature grid with its null token appended.
#[derive(Clone, Copy, Debug)]
pub struct GridKeys {
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Debug)]
struct GridBranch {
    attn: MultiHeadAttention,
    null: ParamId,
    ln: LayerNorm,
}

impl GridBranch {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        heads: usize,
    ) -> Result<Self> {
        let null = (0..c)
            .map(|_| rand::Rng::gen_range(rng, -0.1..0.1))
            .collect();
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), c, heads)?,
            null: store.add(format!("{name}.null"), Tensor::new(vec![1, c], null)?)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), c)?,
        })
    }

    fn keys(&self, g: &mut Graph, store: &ParamStore, grid: Var) -> GridKeys {
        let null = g.param(store, self.null);
        let src = g.concat_rows(&[grid, null]);
        let (k, v) = self.attn.project_kv(g, store, src);
        GridKeys { k, v }
    }

    fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        keys: GridKeys,
        win: &Windows,
    ) -> Var {
        let rows: Arc<[usize]> = win.rows.clone().into();
        let k = g.gather_rows(keys.k, rows.clone());
        let v = g.gather_rows(keys.v, rows);
        let out = self.attn.grouped(g, store, q, k, v, win.offsets.clone());
        let r = g.add(q, out);
        self.ln.forward(g, store, r)
    }
}

#[derive(Clone, Debug)]
pub struct HolisticPerception {
    pub cfg: PerceptionConfig,
    img: GridBranch,
    bev: GridBranch,
    disrel: Mlp,
    agrel: Linear,
    agent_attn: MultiHeadAttention,
    agent_ln: LayerNorm,
}

impl HolisticPerception {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: PerceptionConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        let cd = cfg.disrel();
        Ok(Self {
            img: GridBranch::new(store, rng, &format!("{name}.img"), c, cfg.heads)?,
            bev: GridBranch::new(store, rng, &format!("{name}.bev"), c, cfg.heads)?,
            disrel: Mlp::new(
                store,
                rng,
                &format!("{name}.disrel"),
                MlpSpec::new(vec![4, cd, cd], cfg.activation)?,
                false,
            )?,
            agrel: Linear::new(
                store,
                rng,
                &format!("{name}.agrel"),
                2 * c + cd,
                c,
                LinearInit::Xavier,
            )?,
            agent_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.agent_attn"),
                c,
                cfg.heads,
            )?,
            agent_ln: LayerNorm::new(store, &format!("{name}.agent_ln"), c)?,
            cfg,
        })
    }

    pub fn image_keys(&self, g: &mut Graph, store: &ParamStore, f_img: Var) -> GridKeys {
        self.img.keys(g, store, f_img)
    }

    pub fn bev_keys(&self, g: &mut Graph, store: &ParamStore, f_bev: Var) -> GridKeys {
        self.bev.keys(g, store, f_bev)
    }

    pub fn image_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        keys: GridKeys,
        win: &Windows,
    ) -> Var {
        self.img.attend(g, store, q, keys, win)
    }

    pub fn bev_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        keys: GridKeys,
        win: &Windows,
    ) -> Var {
        self.bev.attend(g, store, q, keys, win)
    }

    /// `[M * A, C_d]` encodings of `(dx, dy, |d|, dheading)` from each
    /// guiding point (`p: [M, 3]`) to each decoded box (`boxes: [A, >=3]`),
    /// mode-major.
    pub fn relative_distance(&self, g: &mut Graph, store: &ParamStore, p: Var, boxes: Var) -> Var {
        let (m, a) = (g.value(p).rows(), g.value(boxes).rows());
        let b3 = g.slice_cols(boxes, 0, 3);
        let b_rep = g.gather_rows(b3, (0..m).flat_map(|_| 0..a).collect::<Vec<_>>());
        let p_rep = g.gather_rows(
            p,
            (0..m)
                .flat_map(|i| std::iter::repeat_n(i, a))
                .collect::<Vec<_>>(),
        );
        let d = g.sub(b_rep, p_rep);
        let dxy = g.slice_cols(d, 0, 2);
        let n = g.row_norm(dxy);
        let dth = g.slice_cols(d, 2, 1);
        let feat = g.concat_cols(&[dxy, n, dth]);
        self.disrel.forward(g, store, feat)
    }

    /// Each mode attends over its `A` fused (query, agent, distance)
    /// entries. With no agents the queries pass through unchanged.
    pub fn agent_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        f_agent: Option<Var>,
        f_disrel: Option<Var>,
    ) -> Var {
        let (Some(f_agent), Some(f_disrel)) = (f_agent, f_disrel) else {
            return q;
        };
        let (m, a) = (g.value(q).rows(), g.value(f_agent).rows());
        if a == 0 {
            return q;
        }
        let q_rep = g.gather_rows(
            q,
            (0..m)
                .flat_map(|i| std::iter::repeat_n(i, a))
                .collect::<Vec<_>>(),
        );
        let f_rep = g.gather_rows(f_agent, (0..m).flat_map(|_| 0..a).collect::<Vec<_>>());
        let fused = g.concat_cols(&[q_rep, f_rep, f_disrel]);
        let ag = self.agrel.forward(g, store, fused);
        let (k, v) = self.agent_attn.project_kv(g, store, ag);
        let offsets: Arc<[usize]> = (0..=m).map(|i| i * a).collect::<Vec<_>>().into();
        let out = self.agent_attn.grouped(g, store, q, k, v, offsets);
        let r = g.add(q, out);
        self.agent_ln.forward(g, store, r)
    }
}
