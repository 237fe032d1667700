//! Target assignment, the four-term training loss and the optimization loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorBank;
use crate::autodiff::{Graph, Var};
use crate::encoder::SceneInputs;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::ops::focal_loss_var;
use crate::optim::{AdamW, AdamWConfig};
use crate::scenario::{Pose, Scene};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Winner mode is the anchor nearest the ground truth.
    NearestAnchor,
    /// Winner mode is the current prediction nearest the ground truth.
    NearestPrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weights of the BEV, agent, regression and classification terms.
    pub lambdas: [f64; 4],
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub assignment: Assignment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: [10.0; 4],
            lr: 2e-4,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            assignment: Assignment::NearestAnchor,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(
                "learning rate must be finite and non-negative",
            ));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid(
                "loss weights must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::invalid("focal gamma must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bev: f64,
    pub l_agent: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub total: f64,
    pub lambdas: [f64; 4],
}

impl LossBreakdown {
    pub fn from_terms(terms: [f64; 4], lambdas: [f64; 4]) -> Self {
        let total = terms.iter().zip(&lambdas).map(|(t, l)| t * l).sum();
        Self {
            l_bev: terms[0],
            l_agent: terms[1],
            l_reg: terms[2],
            l_cls: terms[3],
            total,
            lambdas,
        }
    }

    pub fn terms(&self) -> [f64; 4] {
        [self.l_bev, self.l_agent, self.l_reg, self.l_cls]
    }

    /// Term-wise mean; `None` for an empty slice.
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mut acc = [0.0; 4];
        for it in items {
            for (a, t) in acc.iter_mut().zip(it.terms()) {
                *a += t;
            }
        }
        Some(Self::from_terms(acc.map(|a| a / n), first.lambdas))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanningTarget {
    pub mode: usize,
    /// `3T` values, waypoint-major.
    pub trajectory: Vec<f64>,
}

pub fn assign_planning_targets(bank: &AnchorBank, gt: &[Pose]) -> Result<PlanningTarget> {
    let mode = bank.nearest(gt)?;
    Ok(PlanningTarget {
        mode,
        trajectory: gt.iter().flat_map(|p| p.to_array()).collect(),
    })
}

/// Precomputed inputs and targets for one training scene.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub scene_id: String,
    pub inputs: SceneInputs,
    pub ego_speed: f64,
    pub target: PlanningTarget,
}

pub fn prepare_samples(model: &Model, scenes: &[Scene]) -> Result<Vec<TrainSample>> {
    scenes
        .iter()
        .map(|s| {
            Ok(TrainSample {
                scene_id: s.id.clone(),
                inputs: model.prepare(s)?,
                ego_speed: s.ego.speed_mps,
                target: assign_planning_targets(&model.anchors, &s.gt_trajectory)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_bev: Var,
    pub l_agent: Var,
    pub l_reg: Var,
    pub l_cls: Var,
    pub total: Var,
    pub mode: usize,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, lambdas: [f64; 4]) -> LossBreakdown {
        let terms = [self.l_bev, self.l_agent, self.l_reg, self.l_cls].map(|v| g.scalar(v));
        let mut b = LossBreakdown::from_terms(terms, lambdas);
        b.total = g.scalar(self.total);
        b
    }
}

fn nearest_prediction(traj: &Tensor, gt: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for m in 0..traj.rows() {
        let d: f64 = traj
            .row(m)
            .chunks(3)
            .zip(gt.chunks(3))
            .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
            .sum();
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}

/// Records the weighted loss of one scene on `g`, reading parameters from `store`.
pub fn scene_loss(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let (feats, plan) = model.forward_with(g, store, &sample.inputs, sample.ego_speed)?;
    let l_bev = model.encoder.bev_loss(g, store, &feats, &sample.inputs);
    let l_agent = model.encoder.agent_loss(g, &feats, &sample.inputs);
    let mode = match cfg.assignment {
        Assignment::NearestAnchor => sample.target.mode,
        Assignment::NearestPrediction => {
            nearest_prediction(g.value(plan.trajectories), &sample.target.trajectory)
        }
    };
    let winner = g.gather_rows(plan.trajectories, vec![mode]);
    let t = sample.target.trajectory.len();
    let gt = g.constant(Tensor::new(vec![1, t], sample.target.trajectory.clone())?);
    let d = g.sub(winner, gt);
    let a = g.abs(d);
    let l_reg = g.mean(a);
    let l_cls = focal_loss_var(g, plan.scores, mode, cfg.focal_gamma, cfg.focal_alpha);
    let terms = [l_bev, l_agent, l_reg, l_cls];
    let weighted: Vec<Var> = terms
        .iter()
        .zip(&cfg.lambdas)
        .map(|(&v, &l)| g.scale(v, l))
        .collect();
    let mut total = weighted[0];
    for &w in &weighted[1..] {
        total = g.add(total, w);
    }
    Ok(LossVars {
        l_bev,
        l_agent,
        l_reg,
        l_cls,
        total,
        mode,
    })
}

fn non_finite_report(store: &ParamStore, what: &str) -> Error {
    let bad: Vec<&str> = store
        .iter()
        .filter(|(_, p)| !p.value.all_finite())
        .map(|(_, p)| p.name.as_str())
        .collect();
    if bad.is_empty() {
        Error::NonFinite(format!("{what}; all parameters are finite"))
    } else {
        Error::NonFinite(format!("{what}; non-finite parameters: {}", bad.join(", ")))
    }
}

/// Loss of one scene at the current parameters, without gradients.
pub fn evaluate_loss(
    model: &Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = scene_loss(&mut g, model, &model.store, sample, cfg)?;
    let b = vars.breakdown(&g, cfg.lambdas);
    if !b.total.is_finite() {
        return Err(non_finite_report(
            &model.store,
            &format!("loss of scene {}", sample.scene_id),
        ));
    }
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_bev: f64,
    pub l_agent: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl StepLog {
    pub fn new(step: u64, b: &LossBreakdown) -> Self {
        Self {
            step,
            l_bev: b.l_bev,
            l_agent: b.l_agent,
            l_reg: b.l_reg,
            l_cls: b.l_cls,
            total: b.total,
        }
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.optimizer(), &model.store);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            opt,
            rng,
        })
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// One optimizer update on the mean loss of `batch`. Returns the batch
    /// mean loss measured before the update.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        let mut acc: Vec<Tensor> = self
            .model
            .store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let mut losses = Vec::with_capacity(batch.len());
        for sample in batch {
            let mut g = Graph::new();
            let vars = scene_loss(&mut g, &self.model, &self.model.store, sample, &self.cfg)?;
            let b = vars.breakdown(&g, self.cfg.lambdas);
            if !b.total.is_finite() {
                return Err(non_finite_report(
                    &self.model.store,
                    &format!("loss of scene {} is not finite", sample.scene_id),
                ));
            }
            let grads = g.backward(vars.total);
            for (id, t) in g.param_grads(&grads) {
                for (a, v) in acc[id.index()].data_mut().iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
            losses.push(b);
        }
        let n = batch.len() as f64;
        for t in &mut acc {
            for v in t.data_mut() {
                *v /= n;
            }
        }
        self.opt.step(&mut self.model.store, &acc)?;
        if !self.model.store.all_finite() {
            return Err(non_finite_report(
                &self.model.store,
                "update produced non-finite parameters",
            ));
        }
        Ok(LossBreakdown::mean(&losses).expect("non-empty batch"))
    }

    /// One pass over `samples` in a seeded shuffled order. `on_step` sees
    /// every step's batch loss.
    pub fn train_epoch(
        &mut self,
        samples: &[TrainSample],
        on_step: &mut dyn FnMut(u64, &LossBreakdown),
    ) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let b = self.train_step(&batch)?;
            on_step(self.steps(), &b);
            losses.push(b);
        }
        Ok(LossBreakdown::mean(&losses).expect("at least one batch"))
    }

    /// Runs `cfg.epochs` epochs and returns the mean loss of each.
    pub fn fit(
        &mut self,
        samples: &[TrainSample],
        on_step: &mut dyn FnMut(u64, &LossBreakdown),
    ) -> Result<Vec<LossBreakdown>> {
        (0..self.cfg.epochs)
            .map(|_| self.train_epoch(samples, on_step))
            .collect()
    }
}
