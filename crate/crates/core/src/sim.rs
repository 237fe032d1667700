//! Open-loop replay and a small closed-loop kinematic simulation.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorBank;
use crate::error::{Error, Result};
use crate::geometry::{in_any, wrap_angle, Point};
use crate::metrics::{
    closed_loop_scores, score_plan, summarize, MetricReport, MetricsConfig, ReportSummary,
    RouteResult,
};
use crate::model::Model;
use crate::scenario::{Pose, Scene};

/// Anything that maps a scene to one trajectory in the scene's frame.
pub trait Policy {
    fn plan(&self, scene: &Scene) -> Result<Vec<Pose>>;
}

impl Policy for Model {
    fn plan(&self, scene: &Scene) -> Result<Vec<Pose>> {
        Ok(Model::plan(self, scene)?.best_trajectory().to_vec())
    }
}

/// Replays the scene's ground-truth trajectory.
pub struct GroundTruthPolicy;

impl Policy for GroundTruthPolicy {
    fn plan(&self, scene: &Scene) -> Result<Vec<Pose>> {
        Ok(scene.gt_trajectory.clone())
    }
}

/// Holds the current pose for the whole horizon.
pub struct StationaryPolicy;

impl Policy for StationaryPolicy {
    fn plan(&self, scene: &Scene) -> Result<Vec<Pose>> {
        Ok(vec![scene.ego_pose(); scene.horizon_steps()])
    }
}

/// Always returns one fixed anchor, placed at the ego pose.
pub struct AnchorPolicy<'a> {
    pub bank: &'a AnchorBank,
    pub mode: usize,
}

impl Policy for AnchorPolicy<'_> {
    fn plan(&self, scene: &Scene) -> Result<Vec<Pose>> {
        let anchor = self
            .bank
            .anchors
            .get(self.mode)
            .ok_or_else(|| Error::invalid(format!("anchor {} out of range", self.mode)))?;
        if scene.is_ego_frame() {
            return Ok(anchor.clone());
        }
        let frame = scene.ego_pose();
        Ok(anchor.iter().map(|p| p.to_parent(&frame)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopReplay {
    pub reports: Vec<MetricReport>,
    pub summary: ReportSummary,
}

/// Plans every scene once and scores the plan against the logged future.
pub fn replay_open_loop(
    scenes: &[Scene],
    policy: &dyn Policy,
    cfg: &MetricsConfig,
) -> Result<OpenLoopReplay> {
    let reports = scenes
        .iter()
        .map(|s| score_plan(&policy.plan(s)?, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&reports, cfg)?;
    Ok(OpenLoopReplay { reports, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    OpenLoop,
    ClosedLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: RunMode,
    /// Waypoints executed between replans.
    pub replan_interval: usize,
    pub max_steps: usize,
    /// Completion fraction that ends a route.
    pub completion_threshold: f64,
    pub stop_on_collision: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::ClosedLoop,
            replan_interval: 1,
            max_steps: 16,
            completion_threshold: 0.95,
            stop_on_collision: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replan_interval == 0 {
            return Err(Error::invalid("replan interval must be at least 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.completion_threshold) {
            return Err(Error::invalid("completion threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    Collision,
    OffRoad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub step: usize,
    pub kind: InfractionKind,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub step: usize,
    pub time_s: f64,
    pub ego: Pose,
    pub speed_mps: f64,
    pub infractions: Vec<Infraction>,
    /// Fraction of the route covered, in `[0, 1]`.
    pub completion: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Collision,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteTrace {
    pub result: RouteResult,
    pub termination: Termination,
    pub states: Vec<SimState>,
}

struct Route {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl Route {
    fn new(scene: &Scene) -> Self {
        let mut points = vec![scene.ego.position_m];
        points.extend(scene.gt_trajectory.iter().map(Pose::xy));
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Self { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length of the closest point on the route to `p`.
    fn progress(&self, p: Point) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let u = if len2 > 0.0 {
                (((p[0] - w[0][0]) * d[0] + (p[1] - w[0][1]) * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [w[0][0] + u * d[0], w[0][1] + u * d[1]];
            let dist = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if dist < best.0 {
                best = (dist, self.cumulative[i] + u * len2.sqrt());
            }
        }
        best.1
    }
}

/// Logged pose at time `t` along the ground truth, linearly interpolated;
/// held at the ends.
fn gt_pose_at(scene: &Scene, t: f64) -> Pose {
    let dt = scene.horizon_dt_s;
    let start = scene.ego_pose();
    let gt = &scene.gt_trajectory;
    let k = t / dt - 1.0;
    if k >= (gt.len() - 1) as f64 {
        return gt[gt.len() - 1];
    }
    let (a, b, u) = if k < 0.0 {
        (start, gt[0], (k + 1.0).max(0.0))
    } else {
        let i = k.floor() as usize;
        (gt[i], gt[i + 1], k - i as f64)
    };
    Pose::new(
        a.x_m + u * (b.x_m - a.x_m),
        a.y_m + u * (b.y_m - a.y_m),
        a.heading_rad + u * wrap_angle(b.heading_rad - a.heading_rad),
    )
}

/// The world at `state`, rendered as a scene in the original frame.
fn render(scene: &Scene, state: &SimState) -> Scene {
    let mut s = scene.clone();
    s.id = format!("{}@{}", scene.id, state.step);
    s.ego.position_m = state.ego.xy();
    s.ego.heading_rad = state.ego.heading_rad;
    s.ego.speed_mps = state.speed_mps;
    for a in &mut s.agents {
        a.center_m = [
            a.center_m[0] + a.velocity_mps[0] * state.time_s,
            a.center_m[1] + a.velocity_mps[1] * state.time_s,
        ];
    }
    let dt = scene.horizon_dt_s;
    s.gt_trajectory = (1..=scene.horizon_steps())
        .map(|k| gt_pose_at(scene, state.time_s + k as f64 * dt))
        .collect();
    s
}

/// Unicycle motion over `dt` at constant speed and yaw rate that ends
/// exactly at `target`'s position. Returns the new pose and speed.
pub fn unicycle_step(from: &Pose, target: &Pose, dt: f64) -> (Pose, f64) {
    let d = [target.x_m - from.x_m, target.y_m - from.y_m];
    let chord = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if chord < 1e-9 {
        return (*from, 0.0);
    }
    let half_turn = wrap_angle(d[1].atan2(d[0]) - from.heading_rad);
    let omega = 2.0 * half_turn / dt;
    let arc = if half_turn.abs() < 1e-12 {
        chord
    } else {
        chord * half_turn / half_turn.sin()
    };
    let v = arc / dt;
    let heading = from.heading_rad + omega * dt;
    (Pose::new(target.x_m, target.y_m, heading), v)
}

/// Drives `policy` through `scene` from its initial ego state.
pub fn simulate_closed_loop(
    scene: &Scene,
    policy: &dyn Policy,
    run: &RunConfig,
    metrics: &MetricsConfig,
) -> Result<RouteTrace> {
    run.validate()?;
    let route = Route::new(scene);
    let length = route.length();
    let dt = scene.horizon_dt_s;
    let mut state = SimState {
        step: 0,
        time_s: 0.0,
        ego: scene.ego_pose(),
        speed_mps: scene.ego.speed_mps,
        infractions: Vec::new(),
        completion: 0.0,
    };
    let mut states = vec![state.clone()];
    let (mut was_colliding, mut was_offroad) = (false, false);
    let termination = 'outer: loop {
        let plan = policy.plan(&render(scene, &state))?;
        if plan.is_empty() {
            return Err(Error::invalid("policy returned an empty plan"));
        }
        for target in plan.iter().take(run.replan_interval) {
            let (ego, speed) = unicycle_step(&state.ego, target, dt);
            if !(ego.x_m.is_finite()
                && ego.y_m.is_finite()
                && ego.heading_rad.is_finite()
                && speed.is_finite())
            {
                return Err(Error::NonFinite(format!("ego state in route {}", scene.id)));
            }
            state.step += 1;
            state.time_s = state.step as f64 * dt;
            state.ego = ego;
            state.speed_mps = speed;
            let fp = metrics.ego.footprint(&ego);
            let colliding = scene
                .agents
                .iter()
                .any(|a| fp.overlaps(&a.footprint_at(state.time_s)));
            let offroad = !fp.corners().iter().all(|&c| in_any(&scene.drivable, c));
            if colliding && !was_colliding {
                state.infractions.push(Infraction {
                    step: state.step,
                    kind: InfractionKind::Collision,
                    penalty: metrics.collision_penalty,
                });
            }
            if offroad && !was_offroad {
                state.infractions.push(Infraction {
                    step: state.step,
                    kind: InfractionKind::OffRoad,
                    penalty: metrics.offroad_penalty,
                });
            }
            (was_colliding, was_offroad) = (colliding, offroad);
            let progress = if length > 0.0 {
                route.progress(ego.xy()) / length
            } else {
                1.0
            };
            state.completion = state.completion.max(progress.clamp(0.0, 1.0));
            states.push(state.clone());
            if colliding && run.stop_on_collision {
                break 'outer Termination::Collision;
            }
            if state.completion >= run.completion_threshold {
                break 'outer Termination::Completed;
            }
            if state.step >= run.max_steps {
                break 'outer Termination::MaxSteps;
            }
        }
    };
    let collided = state
        .infractions
        .iter()
        .any(|i| i.kind == InfractionKind::Collision);
    let result = RouteResult {
        route_id: scene.id.clone(),
        completion: 100.0 * state.completion,
        penalties: state.infractions.iter().map(|i| i.penalty).collect(),
        success: state.completion >= run.completion_threshold && !collided,
    };
    Ok(RouteTrace {
        result,
        termination,
        states,
    })
}

pub const ROUTES_SCHEMA: &str = "anchorplan-routes/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub schema: String,
    pub routes: Vec<RouteTrace>,
    pub ds: f64,
    pub sr: f64,
}

pub fn simulate_routes(
    scenes: &[Scene],
    policy: &dyn Policy,
    run: &RunConfig,
    metrics: &MetricsConfig,
) -> Result<ClosedLoopReport> {
    let routes = scenes
        .iter()
        .map(|s| simulate_closed_loop(s, policy, run, metrics))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<RouteResult> = routes.iter().map(|r| r.result.clone()).collect();
    let (ds, sr) = closed_loop_scores(&results)?;
    Ok(ClosedLoopReport {
        schema: ROUTES_SCHEMA.to_string(),
        routes,
        ds,
        sr,
    })
}
