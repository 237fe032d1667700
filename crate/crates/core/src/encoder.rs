//! Scene encoder: BEV and front-view feature grids, agent slots refined by
//! attention over the BEV grid, and the auxiliary segmentation and box heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Mlp, MlpSpec, MultiHeadAttention, ParamId, ParamStore};
use crate::ops::{bce_with_logits_var, cross_entropy_rows_var};
use crate::raster::{
    rasterize_scene, render_front_view, CameraConfig, RasterConfig, IMAGE_CHANNELS,
};
use crate::scenario::Scene;
use crate::tensor::Tensor;

/// Box head output layout: center x, center y, heading, length, width, objectness logit.
pub const BOX_FIELDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub agent_slots: usize,
    pub heads: usize,
    pub activation: Activation,
    pub raster: RasterConfig,
    pub camera: CameraConfig,
    /// Maximum slot-to-box center distance for a match; `None` matches
    /// greedily without a gate.
    pub match_gate_m: Option<f64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            agent_slots: 8,
            heads: 4,
            activation: Activation::Gelu,
            raster: RasterConfig::default(),
            camera: CameraConfig::default(),
            match_gate_m: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::invalid("channels must be a positive multiple of 4"));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid("channels must be divisible by heads"));
        }
        self.raster.validate()?;
        self.camera.validate()
    }
}

/// Per-scene encoder inputs and supervision targets, computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    /// `[cells, 2]` occupancy and drivable channels.
    pub bev: Tensor,
    pub seg_labels: Vec<usize>,
    /// `[pixels, 4]` front-view render.
    pub image: Tensor,
    /// Ground-truth boxes `(cx, cy, heading, length, width)` of agents whose
    /// center lies inside the BEV grid.
    pub boxes: Vec<[f64; 5]>,
}

pub fn prepare_inputs(scene: &Scene, cfg: &EncoderConfig) -> Result<SceneInputs> {
    let raster = rasterize_scene(scene, &cfg.raster)?;
    let image = render_front_view(scene, &cfg.camera)?;
    let boxes = scene
        .agents
        .iter()
        .filter(|a| cfg.raster.cell_of(a.center_m).is_some())
        .map(|a| {
            [
                a.center_m[0],
                a.center_m[1],
                a.heading_rad,
                a.extent_m[0],
                a.extent_m[1],
            ]
        })
        .collect();
    Ok(SceneInputs {
        bev: raster.features(),
        seg_labels: raster.seg_labels(),
        image,
        boxes,
    })
}

/// 2-D sinusoidal encoding: the first half of the channels encodes the row
/// index, the second half the column index, as interleaved sin/cos pairs.
pub fn sinusoidal_2d(rows: usize, cols: usize, channels: usize) -> Tensor {
    let quarter = channels / 4;
    let base: f64 = 100.0;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| base.powf(-(i as f64) / quarter.max(1) as f64))
        .collect();
    let mut data = vec![0.0; rows * cols * channels];
    for r in 0..rows {
        for c in 0..cols {
            let out = &mut data[(r * cols + c) * channels..(r * cols + c + 1) * channels];
            for (i, f) in freqs.iter().enumerate() {
                out[2 * i] = (r as f64 * f).sin();
                out[2 * i + 1] = (r as f64 * f).cos();
                out[2 * quarter + 2 * i] = (c as f64 * f).sin();
                out[2 * quarter + 2 * i + 1] = (c as f64 * f).cos();
            }
        }
    }
    Tensor::new(vec![rows * cols, channels], data).unwrap()
}

/// Greedy nearest-center matching. Returns, per slot, the index of the
/// matched ground-truth box. Pairs are taken in order of increasing
/// distance, ties by slot then box index.
pub fn match_slots(pred: &[[f64; 2]], gt: &[[f64; 5]], gate: Option<f64>) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(pred.len() * gt.len());
    for (s, p) in pred.iter().enumerate() {
        for (j, b) in gt.iter().enumerate() {
            let d = ((p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2)).sqrt();
            if gate.is_none_or(|g| d <= g) {
                pairs.push((d, s, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut slot_of = vec![None; pred.len()];
    let mut taken = vec![false; gt.len()];
    for (_, s, j) in pairs {
        if slot_of[s].is_none() && !taken[j] {
            slot_of[s] = Some(j);
            taken[j] = true;
        }
    }
    slot_of
}

#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `[pixels, C]`
    pub f_img: Var,
    /// `[cells, C]`
    pub f_bev: Var,
    /// `[A, C]`, absent when the encoder has no agent slots.
    pub f_agent: Option<Var>,
    /// `[A, 6]` decoded boxes.
    pub boxes: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub cfg: EncoderConfig,
    bev_mlp: Mlp,
    img_mlp: Mlp,
    agent_queries: Option<ParamId>,
    agent_attn: MultiHeadAttention,
    agent_ln1: LayerNorm,
    agent_ffn: Mlp,
    agent_ln2: LayerNorm,
    seg_head: Mlp,
    box_head: Mlp,
    bev_pe: Tensor,
    img_pe: Tensor,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let act = cfg.activation;
        let spec = |w: Vec<usize>| MlpSpec::new(w, act);
        let bev_mlp = Mlp::new(store, rng, "encoder.bev_mlp", spec(vec![2, c, c])?, false)?;
        let img_mlp = Mlp::new(
            store,
            rng,
            "encoder.img_mlp",
            spec(vec![IMAGE_CHANNELS, c, c])?,
            false,
        )?;
        let agent_queries = if cfg.agent_slots > 0 {
            let data = (0..cfg.agent_slots * c)
                .map(|_| rand::Rng::gen_range(rng, -1.0..1.0))
                .collect();
            Some(store.add(
                "encoder.agent_queries",
                Tensor::new(vec![cfg.agent_slots, c], data)?,
            )?)
        } else {
            None
        };
        let agent_attn = MultiHeadAttention::new(store, rng, "encoder.agent_attn", c, cfg.heads)?;
        let agent_ln1 = LayerNorm::new(store, "encoder.agent_ln1", c)?;
        let agent_ffn = Mlp::new(store, rng, "encoder.agent_ffn", spec(vec![c, c, c])?, false)?;
        let agent_ln2 = LayerNorm::new(store, "encoder.agent_ln2", c)?;
        let seg_head = Mlp::new(store, rng, "encoder.seg_head", spec(vec![c, c, 3])?, false)?;
        let box_head = Mlp::new(
            store,
            rng,
            "encoder.box_head",
            spec(vec![c, c, BOX_FIELDS])?,
            false,
        )?;
        let bev_pe = sinusoidal_2d(cfg.raster.rows, cfg.raster.cols, c);
        let img_pe = sinusoidal_2d(cfg.camera.height_px, cfg.camera.width_px, c);
        Ok(Self {
            cfg,
            bev_mlp,
            img_mlp,
            agent_queries,
            agent_attn,
            agent_ln1,
            agent_ffn,
            agent_ln2,
            seg_head,
            box_head,
            bev_pe,
            img_pe,
        })
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &SceneInputs,
    ) -> Result<Features> {
        if inputs.bev.rows() != self.cfg.raster.cells()
            || inputs.image.rows() != self.cfg.camera.pixels()
        {
            return Err(Error::shape(
                "scene inputs do not match the encoder grid sizes",
            ));
        }
        let bev_in = g.constant(inputs.bev.clone());
        let bev = self.bev_mlp.forward(g, store, bev_in);
        let bev_pe = g.constant(self.bev_pe.clone());
        let f_bev = g.add(bev, bev_pe);

        let img_in = g.constant(inputs.image.clone());
        let img = self.img_mlp.forward(g, store, img_in);
        let img_pe = g.constant(self.img_pe.clone());
        let f_img = g.add(img, img_pe);

        let (f_agent, boxes) = match self.agent_queries {
            Some(qid) => {
                let q0 = g.param(store, qid);
                let a = self.agent_attn.dense(g, store, q0, f_bev, f_bev);
                let r = g.add(q0, a);
                let h = self.agent_ln1.forward(g, store, r);
                let f = self.agent_ffn.forward(g, store, h);
                let r2 = g.add(h, f);
                let f_agent = self.agent_ln2.forward(g, store, r2);
                let boxes = self.box_head.forward(g, store, f_agent);
                (Some(f_agent), Some(boxes))
            }
            None => (None, None),
        };
        Ok(Features {
            f_img,
            f_bev,
            f_agent,
            boxes,
        })
    }

    /// `[cells, 3]` logits over background, drivable, occupied.
    pub fn seg_logits(&self, g: &mut Graph, store: &ParamStore, f_bev: Var) -> Var {
        self.seg_head.forward(g, store, f_bev)
    }

    pub fn bev_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: &Features,
        inputs: &SceneInputs,
    ) -> Var {
        let logits = self.seg_logits(g, store, f.f_bev);
        cross_entropy_rows_var(g, logits, inputs.seg_labels.clone())
    }

    /// Slot-to-box assignment from the current decoded centers.
    pub fn assignment(&self, g: &Graph, f: &Features, inputs: &SceneInputs) -> Vec<Option<usize>> {
        match f.boxes {
            Some(b) => {
                let v = g.value(b);
                let centers: Vec<[f64; 2]> =
                    (0..v.rows()).map(|r| [v.at2(r, 0), v.at2(r, 1)]).collect();
                match_slots(&centers, &inputs.boxes, self.cfg.match_gate_m)
            }
            None => Vec::new(),
        }
    }

    /// L1 on matched boxes plus mean BCE on objectness. Zero without slots.
    pub fn agent_loss(&self, g: &mut Graph, f: &Features, inputs: &SceneInputs) -> Var {
        let Some(boxes) = f.boxes else {
            return g.constant(Tensor::scalar(0.0));
        };
        let slots = self.assignment(g, f, inputs);
        let obj_targets: Vec<f64> = slots
            .iter()
            .map(|m| if m.is_some() { 1.0 } else { 0.0 })
            .collect();
        let obj = g.slice_cols(boxes, BOX_FIELDS - 1, 1);
        let bce = bce_with_logits_var(g, obj, &obj_targets);
        let matched: Vec<(usize, usize)> = slots
            .iter()
            .enumerate()
            .filter_map(|(s, m)| m.map(|j| (s, j)))
            .collect();
        if matched.is_empty() {
            return bce;
        }
        let rows: Vec<usize> = matched.iter().map(|&(s, _)| s).collect();
        let picked = g.gather_rows(boxes, rows);
        let geom = g.slice_cols(picked, 0, 5);
        let target: Vec<Vec<f64>> = matched
            .iter()
            .map(|&(_, j)| inputs.boxes[j].to_vec())
            .collect();
        let t = g.constant(Tensor::from_rows(&target).unwrap());
        let d = g.sub(geom, t);
        let a = g.abs(d);
        let l1 = g.mean(a);
        g.add(l1, bce)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, Profile, ScenarioConfig};
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: 8,
            agent_slots: 4,
            heads: 2,
            raster: RasterConfig {
                rows: 16,
                cols: 16,
                meters_per_cell: 2.0,
                rows_behind: 2,
                origin_m: [0.0, 0.0],
            },
            camera: CameraConfig {
                width_px: 16,
                height_px: 8,
                focal_px: 8.0,
                ..CameraConfig::default()
            },
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn matching_rules() {
        let pred = [[0.0, 0.0], [10.0, 0.0], [20.0, 0.0], [30.0, 0.0]];
        let one = [[9.0, 0.5, 0.0, 4.0, 2.0]];
        let m = match_slots(&pred, &one, Some(2.0));
        assert_eq!(m, vec![None, Some(0), None, None]);
        assert_eq!(match_slots(&pred, &[], None), vec![None; 4]);
        let far = [[100.0, 0.0, 0.0, 4.0, 2.0]];
        assert_eq!(match_slots(&pred, &far, Some(2.0)), vec![None; 4]);
        assert_eq!(match_slots(&pred, &far, None)[3], Some(0));
        // permuting ground truth permutes indices but not the matched pairs
        let two = [[19.0, 0.0, 0.0, 4.0, 2.0], [1.0, 0.0, 0.0, 4.0, 2.0]];
        let swapped = [two[1], two[0]];
        let a = match_slots(&pred, &two, None);
        let b = match_slots(&pred, &swapped, None);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.map(|j| two[j]), y.map(|j| swapped[j]));
        }
    }

    #[test]
    fn empty_scene_zero_mlp_gives_positional_encoding() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SceneEncoder::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).starts_with("encoder.bev_mlp") {
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = Tensor::zeros(&shape);
            }
        }
        let mut scene = generate_scenario(0, Profile::Straight, &ScenarioConfig::default());
        scene.agents.clear();
        let inputs = prepare_inputs(&scene, &cfg).unwrap();
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &inputs).unwrap();
        assert_eq!(g.value(f.f_bev), &sinusoidal_2d(16, 16, 8));
    }

    #[test]
    fn features_have_common_width_and_are_reproducible() {
        let cfg = small_cfg();
        let scene = generate_scenario(4, Profile::Yield, &ScenarioConfig::default());
        let inputs = prepare_inputs(&scene, &cfg).unwrap();
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let enc = SceneEncoder::new(&mut store, &mut rng, cfg.clone()).unwrap();
            let mut g = Graph::new();
            let f = enc.encode(&mut g, &store, &inputs).unwrap();
            assert_eq!(g.shape(f.f_img), &[128, 8]);
            assert_eq!(g.shape(f.f_bev), &[256, 8]);
            assert_eq!(g.shape(f.f_agent.unwrap()), &[4, 8]);
            g.value(f.f_agent.unwrap()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn agents_outside_grid_do_not_change_bev() {
        let cfg = small_cfg();
        let mut scene = generate_scenario(2, Profile::Straight, &ScenarioConfig::default());
        let base = prepare_inputs(&scene, &cfg).unwrap();
        let mut far = scene
            .agents
            .first()
            .copied()
            .unwrap_or(crate::scenario::AgentBox {
                center_m: [0.0, 0.0],
                heading_rad: 0.0,
                extent_m: [4.0, 2.0],
                velocity_mps: [0.0, 0.0],
                class: crate::scenario::AgentClass::Static,
            });
        far.center_m = [-200.0, 90.0];
        scene.agents.push(far);
        let moved = prepare_inputs(&scene, &cfg).unwrap();
        assert_eq!(base.bev, moved.bev);
        assert_eq!(base.boxes, moved.boxes);
    }

    #[test]
    fn agent_loss_without_agents_targets_zero_objectness() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = SceneEncoder::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let mut scene = generate_scenario(0, Profile::Straight, &ScenarioConfig::default());
        scene.agents.clear();
        let inputs = prepare_inputs(&scene, &cfg).unwrap();
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &inputs).unwrap();
        assert!(enc.assignment(&g, &f, &inputs).iter().all(Option::is_none));
        let l = enc.agent_loss(&mut g, &f, &inputs);
        let obj = g.value(f.boxes.unwrap());
        let expect: f64 = (0..4)
            .map(|r| {
                let x = obj.at2(r, 5);
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / 4.0;
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }
}
