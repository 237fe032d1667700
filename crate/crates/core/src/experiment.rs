//! End-to-end experiment: corpus, anchors, training and held-out replay.

use serde::{Deserialize, Serialize};

use crate::anchors::{cluster_anchors, AnchorBank};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::model::{Model, ModelConfig};
use crate::planner::PlanRecord;
use crate::scenario::{generate_corpus, Pose, Profile, ScenarioConfig, Scene};
use crate::sim::{replay_open_loop, AnchorPolicy, OpenLoopReplay, RunConfig};
use crate::trainer::{prepare_samples, LossBreakdown, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub corpus_seed: u64,
    pub scenes: usize,
    /// Scenes at the end of the corpus kept out of clustering and training.
    pub holdout: usize,
    pub anchor_seed: u64,
    pub anchor_iters: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            corpus_seed: 0,
            scenes: 500,
            holdout: 100,
            anchor_seed: 0,
            anchor_iters: 100,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Six modes, eight steps and the compact model.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::compact(6, 8),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.holdout == 0 || self.holdout >= self.scenes {
            return Err(Error::invalid(
                "holdout must be positive and smaller than the corpus",
            ));
        }
        if self.model.planner.horizon != self.scenario.horizon_steps {
            return Err(Error::invalid(
                "planner horizon differs from scenario horizon",
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.run.validate()
    }
}

pub struct ExperimentOutcome {
    pub anchors: AnchorBank,
    /// Held-out replay of the most popular anchor.
    pub baseline: OpenLoopReplay,
    pub trained: OpenLoopReplay,
    pub epochs: Vec<LossBreakdown>,
    pub checkpoint: Checkpoint,
    pub plans: Vec<PlanRecord>,
}

pub fn split_corpus(scenes: &[Scene], holdout: usize) -> (&[Scene], &[Scene]) {
    scenes.split_at(scenes.len() - holdout.min(scenes.len()))
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    on_step: &mut dyn FnMut(u64, &LossBreakdown),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let scenes = generate_corpus(cfg.corpus_seed, cfg.scenes, &Profile::ALL, &cfg.scenario)?;
    let (train, test) = split_corpus(&scenes, cfg.holdout);
    let gts: Vec<Vec<Pose>> = train.iter().map(|s| s.gt_trajectory.clone()).collect();
    let (anchors, _) = cluster_anchors(
        &gts,
        cfg.model.planner.modes,
        cfg.anchor_seed,
        cfg.anchor_iters,
    )?;
    let baseline = replay_open_loop(
        test,
        &AnchorPolicy {
            bank: &anchors,
            mode: 0,
        },
        &cfg.metrics,
    )?;

    let model = Model::new(cfg.model.clone(), anchors.clone())?;
    let samples = prepare_samples(&model, train)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let epochs = trainer.fit(&samples, on_step)?;
    let model = trainer.model;

    let trained = replay_open_loop(test, &model, &cfg.metrics)?;
    let plans = test
        .iter()
        .map(|s| {
            Ok(PlanRecord::new(
                &s.id,
                cfg.model.planner.decoding,
                model.plan(s)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutcome {
        anchors,
        baseline,
        trained,
        epochs,
        checkpoint: model.checkpoint()?,
        plans,
    })
}
