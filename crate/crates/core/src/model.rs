//! Full planning model: scene encoder, trajectory decoder and anchor bank.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorBank;
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::encoder::{prepare_inputs, EncoderConfig, Features, SceneEncoder, SceneInputs};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::perception::PerceptionConfig;
use crate::planner::{PlanOutput, PlanVars, Planner, PlannerConfig};
use crate::raster::{CameraConfig, RasterConfig};
use crate::scenario::Scene;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub planner: PlannerConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Reduced-size model for CPU training runs: 32 channels, a 32x32 BEV
    /// grid at 1 m and a 32x16 front view.
    pub fn compact(modes: usize, horizon: usize) -> Self {
        let raster = RasterConfig {
            rows: 32,
            cols: 32,
            meters_per_cell: 1.0,
            rows_behind: 4,
            origin_m: [0.0, 0.0],
        };
        let camera = CameraConfig {
            width_px: 32,
            height_px: 16,
            focal_px: 16.0,
            ..CameraConfig::default()
        };
        let perception = PerceptionConfig {
            channels: 32,
            heads: 4,
            ..PerceptionConfig::default()
        };
        Self {
            encoder: EncoderConfig {
                channels: 32,
                heads: 4,
                raster,
                camera,
                ..EncoderConfig::default()
            },
            planner: PlannerConfig {
                modes,
                horizon,
                perception,
                ..PlannerConfig::default()
            },
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let p = &self.planner.perception;
        if p.channels != self.encoder.channels {
            return Err(Error::invalid("planner and encoder channel widths differ"));
        }
        if p.heads == 0 || !p.channels.is_multiple_of(p.heads) {
            return Err(Error::invalid(
                "planner channels must be divisible by heads",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SavedModel {
    config: ModelConfig,
    anchors: AnchorBank,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: SceneEncoder,
    pub planner: Planner,
    pub anchors: AnchorBank,
    anchor_flat: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(cfg: ModelConfig, anchors: AnchorBank) -> Result<Self> {
        cfg.validate()?;
        anchors.validate()?;
        if anchors.modes != cfg.planner.modes || anchors.horizon != cfg.planner.horizon {
            return Err(Error::invalid(format!(
                "anchor bank is {}x{}, planner expects {}x{}",
                anchors.modes, anchors.horizon, cfg.planner.modes, cfg.planner.horizon
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let encoder = SceneEncoder::new(&mut store, &mut rng, cfg.encoder.clone())?;
        let planner = Planner::new(&mut store, &mut rng, cfg.planner.clone())?;
        let anchor_flat = anchors.flat();
        Ok(Self {
            cfg,
            store,
            encoder,
            planner,
            anchors,
            anchor_flat,
        })
    }

    pub fn prepare(&self, scene: &Scene) -> Result<SceneInputs> {
        if scene.horizon_steps() != self.cfg.planner.horizon {
            return Err(Error::invalid(format!(
                "scene {} has {} steps, model plans {}",
                scene.id,
                scene.horizon_steps(),
                self.cfg.planner.horizon
            )));
        }
        prepare_inputs(scene, &self.cfg.encoder)
    }

    /// Builds the forward graph against `store`, which must share this
    /// model's parameter layout.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &SceneInputs,
        ego_speed: f64,
    ) -> Result<(Features, PlanVars)> {
        let feats = self.encoder.encode(g, store, inputs)?;
        let plan = self.planner.forward(
            g,
            store,
            &feats,
            &self.cfg.encoder.raster,
            &self.cfg.encoder.camera,
            &self.anchor_flat,
            ego_speed,
        )?;
        Ok((feats, plan))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &SceneInputs,
        ego_speed: f64,
    ) -> Result<(Features, PlanVars)> {
        self.forward_with(g, &self.store, inputs, ego_speed)
    }

    /// Plans in the ego frame and returns trajectories in the scene's frame.
    pub fn plan(&self, scene: &Scene) -> Result<PlanOutput> {
        let local = scene.to_ego_frame();
        let inputs = self.prepare(&local)?;
        let mut g = Graph::new();
        let (_, vars) = self.forward(&mut g, &inputs, scene.ego.speed_mps)?;
        let mut out = PlanOutput::from_vars(&g, &vars)?;
        if !scene.is_ego_frame() {
            let frame = scene.ego_pose();
            for traj in &mut out.trajectories {
                for p in traj.iter_mut() {
                    *p = p.to_parent(&frame);
                }
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let saved = SavedModel {
            config: self.cfg.clone(),
            anchors: self.anchors.clone(),
        };
        Ok(Checkpoint::from_store(
            &self.store,
            serde_json::to_value(saved)?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let saved: SavedModel = serde_json::from_value(ckpt.model.clone())?;
        let mut model = Self::new(saved.config, saved.anchors)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::cluster_anchors;
    use crate::planner::Decoding;
    use crate::scenario::{generate_corpus, Pose, Profile, ScenarioConfig};

    fn setup(decoding: Decoding) -> (Model, Vec<Scene>) {
        let scenes = generate_corpus(11, 20, &Profile::ALL, &ScenarioConfig::default()).unwrap();
        let gts: Vec<Vec<Pose>> = scenes.iter().map(|s| s.gt_trajectory.clone()).collect();
        let (bank, _) = cluster_anchors(&gts, 4, 0, 50).unwrap();
        let mut cfg = ModelConfig::compact(4, 8);
        cfg.planner.decoding = decoding;
        (Model::new(cfg, bank).unwrap(), scenes)
    }

    #[test]
    fn untrained_model_returns_anchors_exactly() {
        for decoding in [Decoding::Autoregressive, Decoding::OneShot] {
            let (model, scenes) = setup(decoding);
            let flat = model.anchors.flat();
            for s in &scenes[..5] {
                let out = model.plan(s).unwrap();
                for (m, traj) in out.trajectories.iter().enumerate() {
                    let got: Vec<u64> = traj
                        .iter()
                        .flat_map(|p| p.to_array())
                        .map(f64::to_bits)
                        .collect();
                    let want: Vec<u64> = flat[m].iter().map(|v| v.to_bits()).collect();
                    assert_eq!(got, want);
                }
                assert!(out.scores.iter().all(|&v| v == 0.0));
                assert_eq!(out.best_mode(), 0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_plans() {
        let (mut model, scenes) = setup(Decoding::Autoregressive);
        let ids: Vec<_> = model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            for (j, v) in model.store.value_mut(id).data_mut().iter_mut().enumerate() {
                *v += 1e-3 * (((k * 31 + j * 7) % 13) as f64 - 6.0);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(
            back.plan(&scenes[0]).unwrap(),
            model.plan(&scenes[0]).unwrap()
        );
    }

    #[test]
    fn rejects_mismatched_anchor_bank() {
        let (model, _) = setup(Decoding::Autoregressive);
        let cfg = ModelConfig::compact(5, 8);
        assert!(Model::new(cfg, model.anchors.clone()).is_err());
    }
}
