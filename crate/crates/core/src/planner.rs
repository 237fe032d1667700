//! Anchor-guided trajectory decoder, autoregressive or one-shot.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::Features;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec, ParamStore};
use crate::ops::softmax;
use crate::perception::{gather_windows, GridTarget, HolisticPerception, PerceptionConfig};
use crate::raster::{CameraConfig, RasterConfig};
use crate::scenario::Pose;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// One perception pass and one offset per step, `T` steps.
    Autoregressive,
    /// One perception pass over all guiding points, all offsets at once.
    OneShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub modes: usize,
    pub horizon: usize,
    pub perception: PerceptionConfig,
    pub decoding: Decoding,
    /// Use the previous refined point plus the anchor step as the next
    /// guiding point instead of the anchor point itself.
    pub chain_refined: bool,
    /// Frequencies per coordinate in the MALN conditioning encoding.
    pub maln_freqs: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            modes: 20,
            horizon: 8,
            perception: PerceptionConfig::default(),
            decoding: Decoding::Autoregressive,
            chain_refined: false,
            maln_freqs: 4,
        }
    }
}

/// Sinusoidal encoding of `(x, y, heading)`: `sin, cos` of each coordinate
/// at frequencies `4^-k`, `k < freqs`.
pub fn pose_encoding(p: &[[f64; 3]], freqs: usize) -> Tensor {
    let width = 6 * freqs;
    let mut data = Vec::with_capacity(p.len() * width);
    for row in p {
        for v in row {
            for k in 0..freqs {
                let w = 0.25f64.powi(k as i32);
                data.push((v * w).sin());
                data.push((v * w).cos());
            }
        }
    }
    Tensor::new(vec![p.len(), width], data).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct PlanVars {
    /// `[M, 3T]`, waypoint-major `(x, y, heading)`.
    pub trajectories: Var,
    /// `[M, 1]` classification logits.
    pub scores: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    pub trajectories: Vec<Vec<Pose>>,
    pub scores: Vec<f64>,
    pub mode_probs: Vec<f64>,
}

impl PlanOutput {
    pub fn from_vars(g: &Graph, vars: &PlanVars) -> Result<Self> {
        let t = g.value(vars.trajectories);
        let trajectories: Vec<Vec<Pose>> = (0..t.rows())
            .map(|m| {
                t.row(m)
                    .chunks(3)
                    .map(|c| Pose::new(c[0], c[1], c[2]))
                    .collect()
            })
            .collect();
        let scores = g.value(vars.scores).data().to_vec();
        if !t.all_finite() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("planner output".into()));
        }
        let mode_probs = softmax(&Tensor::new(vec![scores.len()], scores.clone())?, 0)?.into_data();
        Ok(Self {
            trajectories,
            scores,
            mode_probs,
        })
    }

    /// Highest-probability mode; lowest index on ties.
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.mode_probs.iter().enumerate() {
            if *p > self.mode_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn best_trajectory(&self) -> &[Pose] {
        &self.trajectories[self.best_mode()]
    }
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub cfg: PlannerConfig,
    query_init: Mlp,
    pub perception: HolisticPerception,
    maln_cond: Option<Mlp>,
    offset_head: Mlp,
    score_head: Mlp,
}

impl Planner {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: PlannerConfig) -> Result<Self> {
        if cfg.modes == 0 || cfg.horizon == 0 {
            return Err(Error::invalid(
                "planner needs at least one mode and one step",
            ));
        }
        let c = cfg.perception.channels;
        let act: Activation = cfg.perception.activation;
        let t = cfg.horizon;
        let query_init = Mlp::new(
            store,
            rng,
            "planner.query_init",
            MlpSpec::new(vec![3 * t + 1, c, c], act)?,
            false,
        )?;
        let perception =
            HolisticPerception::new(store, rng, "planner.perception", cfg.perception.clone())?;
        let (maln_cond, offset_out) = match cfg.decoding {
            Decoding::Autoregressive => (
                Some(Mlp::new(
                    store,
                    rng,
                    "planner.maln",
                    MlpSpec::new(vec![6 * cfg.maln_freqs.max(1), c, 2 * c], act)?,
                    true,
                )?),
                3,
            ),
            Decoding::OneShot => (None, 3 * t),
        };
        let offset_head = Mlp::new(
            store,
            rng,
            "planner.offset_head",
            MlpSpec::new(vec![c, c, offset_out], act)?,
            true,
        )?;
        let score_head = Mlp::new(
            store,
            rng,
            "planner.score_head",
            MlpSpec::new(vec![c, c, 1], act)?,
            true,
        )?;
        Ok(Self {
            cfg,
            query_init,
            perception,
            maln_cond,
            offset_head,
            score_head,
        })
    }

    fn init_queries(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        anchors: &[Vec<f64>],
        ego_speed: f64,
    ) -> Var {
        let rows: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| {
                let mut r = a.clone();
                r.push(ego_speed);
                r
            })
            .collect();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        self.query_init.forward(g, store, x)
    }

    /// `gamma(p) * layer_norm(q) + beta(p)` with `gamma = 1 + g(p)`, where the
    /// conditioning network starts at zero.
    pub fn maln(&self, g: &mut Graph, store: &ParamStore, q: Var, p: &[[f64; 3]]) -> Var {
        let Some(cond) = &self.maln_cond else {
            return q;
        };
        let c = self.cfg.perception.channels;
        let enc = g.constant(pose_encoding(p, self.cfg.maln_freqs.max(1)));
        let gb = cond.forward(g, store, enc);
        let gamma = g.slice_cols(gb, 0, c);
        let beta = g.slice_cols(gb, c, c);
        let n = g.layer_norm_rows(q, crate::nn::LayerNorm::DEFAULT_EPS);
        let ng = g.mul(n, gamma);
        let s = g.add(n, ng);
        g.add(s, beta)
    }

    fn check(&self, anchors: &[Vec<f64>]) -> Result<()> {
        if anchors.len() != self.cfg.modes
            || anchors.iter().any(|a| a.len() != 3 * self.cfg.horizon)
        {
            return Err(Error::shape(format!(
                "planner expects {} anchors of {} waypoints",
                self.cfg.modes, self.cfg.horizon
            )));
        }
        Ok(())
    }

    /// Runs the decoder. `anchors` is `[M][3T]` waypoint-major.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &Features,
        raster: &RasterConfig,
        camera: &CameraConfig,
        anchors: &[Vec<f64>],
        ego_speed: f64,
    ) -> Result<PlanVars> {
        self.check(anchors)?;
        match self.cfg.decoding {
            Decoding::Autoregressive => {
                self.forward_ar(g, store, feats, raster, camera, anchors, ego_speed)
            }
            Decoding::OneShot => {
                self.forward_nar(g, store, feats, raster, camera, anchors, ego_speed)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_ar(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &Features,
        raster: &RasterConfig,
        camera: &CameraConfig,
        anchors: &[Vec<f64>],
        ego_speed: f64,
    ) -> Result<PlanVars> {
        let pc = &self.cfg.perception;
        let anchor_var = g.constant(Tensor::from_rows(anchors)?);
        let mut q = self.init_queries(g, store, anchors, ego_speed);
        let img_keys = self.perception.image_keys(g, store, feats.f_img);
        let bev_keys = self.perception.bev_keys(g, store, feats.f_bev);
        let mut refined: Vec<Var> = Vec::with_capacity(self.cfg.horizon);
        for t in 0..self.cfg.horizon {
            let anchor_t = g.slice_cols(anchor_var, 3 * t, 3);
            let p_t = match refined.last() {
                Some(&prev) if self.cfg.chain_refined => {
                    let step: Vec<Vec<f64>> = anchors
                        .iter()
                        .map(|a| (0..3).map(|i| a[3 * t + i] - a[3 * (t - 1) + i]).collect())
                        .collect();
                    let step = g.constant(Tensor::from_rows(&step)?);
                    g.add(prev, step)
                }
                _ => anchor_t,
            };
            let pv = g.value(p_t);
            let points: Vec<[f64; 3]> = (0..pv.rows())
                .map(|m| [pv.at2(m, 0), pv.at2(m, 1), pv.at2(m, 2)])
                .collect();
            if t > 0 {
                q = self.maln(g, store, q, &points);
            }
            let per_mode: Vec<Vec<[f64; 3]>> = points.iter().map(|p| vec![*p]).collect();
            let img_win = gather_windows(&per_mode, GridTarget::Camera(camera), pc.img_window);
            q = self
                .perception
                .image_attention(g, store, q, img_keys, &img_win);
            let bev_win = gather_windows(&per_mode, GridTarget::Bev(raster), pc.bev_window);
            q = self
                .perception
                .bev_attention(g, store, q, bev_keys, &bev_win);
            let disrel = feats
                .boxes
                .map(|b| self.perception.relative_distance(g, store, p_t, b));
            q = self
                .perception
                .agent_attention(g, store, q, feats.f_agent, disrel);
            let delta = self.offset_head.forward(g, store, q);
            refined.push(g.add(p_t, delta));
        }
        let trajectories = if refined.len() == 1 {
            refined[0]
        } else {
            g.concat_cols(&refined)
        };
        let scores = self.score_head.forward(g, store, q);
        Ok(PlanVars {
            trajectories,
            scores,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_nar(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &Features,
        raster: &RasterConfig,
        camera: &CameraConfig,
        anchors: &[Vec<f64>],
        ego_speed: f64,
    ) -> Result<PlanVars> {
        let pc = &self.cfg.perception;
        let anchor_var = g.constant(Tensor::from_rows(anchors)?);
        let mut q = self.init_queries(g, store, anchors, ego_speed);
        let per_mode: Vec<Vec<[f64; 3]>> = anchors
            .iter()
            .map(|a| a.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect();
        let img_keys = self.perception.image_keys(g, store, feats.f_img);
        let img_win = gather_windows(&per_mode, GridTarget::Camera(camera), pc.img_window);
        q = self
            .perception
            .image_attention(g, store, q, img_keys, &img_win);
        let bev_keys = self.perception.bev_keys(g, store, feats.f_bev);
        let bev_win = gather_windows(&per_mode, GridTarget::Bev(raster), pc.bev_window);
        q = self
            .perception
            .bev_attention(g, store, q, bev_keys, &bev_win);
        let p0 = g.slice_cols(anchor_var, 0, 3);
        let disrel = feats
            .boxes
            .map(|b| self.perception.relative_distance(g, store, p0, b));
        q = self
            .perception
            .agent_attention(g, store, q, feats.f_agent, disrel);
        let delta = self.offset_head.forward(g, store, q);
        let trajectories = g.add(anchor_var, delta);
        let scores = self.score_head.forward(g, store, q);
        Ok(PlanVars {
            trajectories,
            scores,
        })
    }
}

pub const PLAN_SCHEMA: &str = "anchorplan-plan/v1";

/// One line of a plans file: the full decoder output and the selected mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub schema: String,
    pub scene_id: String,
    pub decoding: Decoding,
    pub selected_mode: usize,
    pub trajectory: Vec<Pose>,
    pub output: PlanOutput,
}

impl PlanRecord {
    pub fn new(scene_id: &str, decoding: Decoding, output: PlanOutput) -> Self {
        let selected_mode = output.best_mode();
        Self {
            schema: PLAN_SCHEMA.to_string(),
            scene_id: scene_id.to_string(),
            decoding,
            selected_mode,
            trajectory: output.trajectories[selected_mode].clone(),
            output,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: PlanRecord = serde_json::from_str(s)?;
        if r.schema != PLAN_SCHEMA {
            return Err(Error::Schema(format!(
                "unexpected plan schema {}",
                r.schema
            )));
        }
        Ok(r)
    }
}
