//! Synthetic driving scenes in the ego frame at `t = 0`.
//!
//! Every scene is a deterministic function of `(seed, profile)`. The road
//! layout and the agents carry the cue for the maneuver, so a planner that
//! reads the scene can tell the profiles apart: turns follow a curved road,
//! a lane change has a stopped vehicle blocking a two-lane road, and a yield
//! has a crossing pedestrian or cyclist.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{corridor, in_any, rigid, to_local, Obb, Point, Polygon};

pub const SCENE_SCHEMA: &str = "anchorplan-scene/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChange,
    Yield,
}

impl Profile {
    pub const ALL: [Profile; 5] = [
        Profile::Straight,
        Profile::LeftTurn,
        Profile::RightTurn,
        Profile::LaneChange,
        Profile::Yield,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Straight => "straight",
            Profile::LeftTurn => "left_turn",
            Profile::RightTurn => "right_turn",
            Profile::LaneChange => "lane_change",
            Profile::Yield => "yield",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown profile {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
    Static,
}

impl AgentClass {
    /// Silhouette height used by the front-view render.
    pub fn height_m(self) -> f64 {
        match self {
            AgentClass::Vehicle => 1.6,
            AgentClass::Pedestrian => 1.8,
            AgentClass::Cyclist => 1.7,
            AgentClass::Static => 1.5,
        }
    }
}

/// Waypoint `(x, y, heading)` in meters / radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x_m: x,
            y_m: y,
            heading_rad: heading,
        }
    }

    pub fn xy(&self) -> Point {
        [self.x_m, self.y_m]
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x_m, self.y_m, self.heading_rad]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// This pose, given in the frame `frame`, expressed in the parent frame.
    pub fn to_parent(&self, frame: &Pose) -> Pose {
        let p = rigid(self.xy(), frame.heading_rad, frame.xy());
        Pose::new(p[0], p[1], self.heading_rad + frame.heading_rad)
    }

    /// This pose expressed in the frame `frame`.
    pub fn to_frame(&self, frame: &Pose) -> Pose {
        let p = to_local(self.xy(), frame.xy(), frame.heading_rad);
        Pose::new(p[0], p[1], self.heading_rad - frame.heading_rad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position_m: Point,
    pub heading_rad: f64,
    pub speed_mps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentBox {
    pub center_m: Point,
    pub heading_rad: f64,
    /// `(length, width)`.
    pub extent_m: [f64; 2],
    pub velocity_mps: [f64; 2],
    pub class: AgentClass,
}

impl AgentBox {
    /// Footprint after `t` seconds of constant-velocity motion.
    pub fn footprint_at(&self, t: f64) -> Obb {
        Obb::new(
            [
                self.center_m[0] + self.velocity_mps[0] * t,
                self.center_m[1] + self.velocity_mps[1] * t,
            ],
            self.heading_rad,
            self.extent_m[0],
            self.extent_m[1],
        )
    }
}

/// Ego vehicle footprint dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoDims {
    pub length_m: f64,
    pub width_m: f64,
}

impl Default for EgoDims {
    fn default() -> Self {
        Self {
            length_m: 4.5,
            width_m: 2.0,
        }
    }
}

impl EgoDims {
    pub fn footprint(&self, pose: &Pose) -> Obb {
        Obb::new(pose.xy(), pose.heading_rad, self.length_m, self.width_m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema: String,
    pub id: String,
    pub profile: Profile,
    pub horizon_dt_s: f64,
    pub ego: EgoState,
    pub agents: Vec<AgentBox>,
    pub drivable: Vec<Polygon>,
    /// Waypoint `k` is the ground-truth pose at `(k + 1) * horizon_dt_s`.
    pub gt_trajectory: Vec<Pose>,
}

impl Scene {
    pub fn horizon_steps(&self) -> usize {
        self.gt_trajectory.len()
    }

    /// Checks the structural invariants every scene must satisfy.
    pub fn validate(&self, cfg: &ScenarioConfig) -> Result<()> {
        if self.schema != SCENE_SCHEMA {
            return Err(Error::Schema(format!(
                "unexpected scene schema {}",
                self.schema
            )));
        }
        if self.gt_trajectory.len() != cfg.horizon_steps {
            return Err(Error::invalid(format!(
                "scene {}: {} waypoints, expected {}",
                self.id,
                self.gt_trajectory.len(),
                cfg.horizon_steps
            )));
        }
        if self.horizon_dt_s <= 0.0 {
            return Err(Error::invalid("horizon_dt_s must be positive"));
        }
        if self.ego.speed_mps < 0.0 {
            return Err(Error::invalid("negative ego speed"));
        }
        if self.agents.len() > cfg.max_agents {
            return Err(Error::invalid(format!(
                "scene {} has {} agents, limit {}",
                self.id,
                self.agents.len(),
                cfg.max_agents
            )));
        }
        let finite = |v: f64| v.is_finite();
        let ego_ok = finite(self.ego.position_m[0])
            && finite(self.ego.position_m[1])
            && finite(self.ego.heading_rad)
            && finite(self.ego.speed_mps);
        let gt_ok = self
            .gt_trajectory
            .iter()
            .all(|p| finite(p.x_m) && finite(p.y_m) && finite(p.heading_rad));
        if !ego_ok || !gt_ok {
            return Err(Error::NonFinite(format!(
                "scene {} has non-finite state",
                self.id
            )));
        }
        for a in &self.agents {
            if !(a.extent_m[0] > 0.0 && a.extent_m[1] > 0.0) {
                return Err(Error::invalid(format!(
                    "scene {}: non-positive agent extent",
                    self.id
                )));
            }
            let vals = [
                a.center_m[0],
                a.center_m[1],
                a.heading_rad,
                a.velocity_mps[0],
                a.velocity_mps[1],
            ];
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("scene {}: agent state", self.id)));
            }
        }
        for p in &self.drivable {
            if !p.is_simple() || !p.is_ccw() {
                return Err(Error::invalid(format!(
                    "scene {}: drivable polygon must be simple and counterclockwise",
                    self.id
                )));
            }
        }
        let first = self.gt_trajectory[0];
        let d = ((first.x_m - self.ego.position_m[0]).powi(2)
            + (first.y_m - self.ego.position_m[1]).powi(2))
        .sqrt();
        let bound = self.ego.speed_mps * self.horizon_dt_s * 1.5;
        if d > bound + 1e-9 {
            return Err(Error::invalid(format!(
                "scene {}: first waypoint {d:.3} m from ego exceeds {bound:.3} m",
                self.id
            )));
        }
        Ok(())
    }

    /// Copy with every position shifted by `by` (headings unchanged).
    pub fn translated(&self, by: Point) -> Scene {
        let mut s = self.clone();
        s.ego.position_m = [s.ego.position_m[0] + by[0], s.ego.position_m[1] + by[1]];
        for a in &mut s.agents {
            a.center_m = [a.center_m[0] + by[0], a.center_m[1] + by[1]];
        }
        s.drivable = s.drivable.iter().map(|p| p.translated(by)).collect();
        for p in &mut s.gt_trajectory {
            p.x_m += by[0];
            p.y_m += by[1];
        }
        s
    }

    pub fn ego_pose(&self) -> Pose {
        Pose::new(
            self.ego.position_m[0],
            self.ego.position_m[1],
            self.ego.heading_rad,
        )
    }

    /// True when the ego sits at the origin facing `+x`.
    pub fn is_ego_frame(&self) -> bool {
        self.ego.position_m == [0.0, 0.0] && self.ego.heading_rad == 0.0
    }

    /// Copy re-expressed in the ego frame.
    pub fn to_ego_frame(&self) -> Scene {
        if self.is_ego_frame() {
            return self.clone();
        }
        let frame = self.ego_pose();
        let th = frame.heading_rad;
        let mut s = self.clone();
        s.ego.position_m = [0.0, 0.0];
        s.ego.heading_rad = 0.0;
        for a in &mut s.agents {
            let c = Pose::new(a.center_m[0], a.center_m[1], a.heading_rad).to_frame(&frame);
            a.center_m = c.xy();
            a.heading_rad = c.heading_rad;
            a.velocity_mps = rigid(a.velocity_mps, -th, [0.0, 0.0]);
        }
        s.drivable = s
            .drivable
            .iter()
            .map(|p| {
                Polygon::new(
                    p.vertices
                        .iter()
                        .map(|&v| to_local(v, frame.xy(), th))
                        .collect(),
                )
            })
            .collect();
        for p in &mut s.gt_trajectory {
            *p = p.to_frame(&frame);
        }
        s
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Scene> {
        let scene: Scene = serde_json::from_str(s)?;
        if scene.schema != SCENE_SCHEMA {
            return Err(Error::Schema(format!(
                "unexpected scene schema {}",
                scene.schema
            )));
        }
        Ok(scene)
    }
}

pub fn write_corpus(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        writeln!(f, "{}", s.to_json_line()?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Scene>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            Scene::from_json(&line)
                .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub horizon_steps: usize,
    pub dt_s: f64,
    pub max_agents: usize,
    /// Probability of a hazard in profiles where one is optional.
    pub hazard_prob: f64,
    pub ego: EgoDims,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 8,
            dt_s: 0.5,
            max_agents: 8,
            hazard_prob: 0.4,
            ego: EgoDims::default(),
        }
    }
}

const LANE_WIDTH: f64 = 3.5;
const ROAD_HALF_WIDTH: f64 = 2.5;
const PATH_DS: f64 = 0.1;
const PATH_START: f64 = -12.0;
const PATH_END: f64 = 90.0;

/// Densely sampled centerline, parameterized by arc length.
struct Centerline {
    poses: Vec<Pose>,
}

impl Centerline {
    fn from_curvature(kappa: impl Fn(f64) -> f64) -> Self {
        // integrate forward from s = 0, mirror the straight lead-in behind
        let n = ((PATH_END - 0.0) / PATH_DS).round() as usize;
        let mut fwd = Vec::with_capacity(n + 1);
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        fwd.push(Pose::new(x, y, th));
        for i in 0..n {
            let s = i as f64 * PATH_DS;
            let k = kappa(s + PATH_DS / 2.0);
            let th_mid = th + k * PATH_DS / 2.0;
            x += PATH_DS * th_mid.cos();
            y += PATH_DS * th_mid.sin();
            th += k * PATH_DS;
            fwd.push(Pose::new(x, y, th));
        }
        let nb = (-PATH_START / PATH_DS).round() as usize;
        let mut poses: Vec<Pose> = (1..=nb)
            .rev()
            .map(|i| Pose::new(-(i as f64) * PATH_DS, 0.0, 0.0))
            .collect();
        poses.extend(fwd);
        Self { poses }
    }

    fn from_lateral(lateral: impl Fn(f64) -> f64) -> Self {
        // x is the parameter; arc length accumulated numerically
        let mut pts: Vec<Point> = Vec::new();
        let mut x = PATH_START;
        while x <= PATH_END {
            pts.push([x, lateral(x)]);
            x += PATH_DS;
        }
        let mut out: Vec<Pose> = Vec::with_capacity(pts.len());
        // resample at equal arc-length spacing
        let mut s_acc = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            s_acc.push(s_acc.last().unwrap() + d);
        }
        let s0 = s_acc[(-PATH_START / PATH_DS).round() as usize];
        let total = *s_acc.last().unwrap();
        let mut s = 0.0;
        let mut j = 0;
        while s <= total {
            while j + 2 < s_acc.len() && s_acc[j + 1] < s {
                j += 1;
            }
            let f = ((s - s_acc[j]) / (s_acc[j + 1] - s_acc[j])).clamp(0.0, 1.0);
            let (a, b) = (pts[j], pts[j + 1]);
            let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
            out.push(Pose::new(
                a[0] + f * (b[0] - a[0]),
                a[1] + f * (b[1] - a[1]),
                heading,
            ));
            s += PATH_DS;
        }
        // shift so that arc length 0 sits at the ego origin
        let offset = (s0 / PATH_DS).round() as usize;
        let lead_in = (-PATH_START / PATH_DS).round() as usize;
        let start = offset.saturating_sub(lead_in);
        Self {
            poses: out[start..].to_vec(),
        }
    }

    fn origin_index(&self) -> usize {
        (-PATH_START / PATH_DS).round() as usize
    }

    /// Pose at arc length `s` from the ego origin (linear interpolation).
    fn at(&self, s: f64) -> Pose {
        let f = s / PATH_DS + self.origin_index() as f64;
        let i = (f.floor().max(0.0) as usize).min(self.poses.len() - 2);
        let t = (f - i as f64).clamp(0.0, 1.0);
        let (a, b) = (self.poses[i], self.poses[i + 1]);
        Pose::new(
            a.x_m + t * (b.x_m - a.x_m),
            a.y_m + t * (b.y_m - a.y_m),
            a.heading_rad + t * (b.heading_rad - a.heading_rad),
        )
    }

    fn corridor(&self, half_width: f64) -> Polygon {
        let step = (1.0 / PATH_DS).round() as usize;
        let pts: Vec<Point> = self.poses.iter().step_by(step).map(Pose::xy).collect();
        corridor(&pts, half_width)
    }
}

/// Arc length travelled after `t` seconds under `accel(t, v)` starting at
/// `v0`, with speed clamped at zero.
fn travelled(v0: f64, t_end: f64, accel: &impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let h = 0.01;
    let n = (t_end / h).round() as usize;
    let (mut s, mut v) = (0.0, v0);
    for i in 0..n {
        let t = i as f64 * h;
        let a = accel(t, v);
        let v1 = (v + a * h).max(0.0);
        s += 0.5 * (v + v1) * h;
        v = v1;
    }
    (s, v)
}

fn sample_gt(
    path: &Centerline,
    v0: f64,
    cfg: &ScenarioConfig,
    accel: impl Fn(f64, f64) -> f64,
) -> Vec<Pose> {
    (1..=cfg.horizon_steps)
        .map(|k| {
            let (s, _) = travelled(v0, k as f64 * cfg.dt_s, &accel);
            path.at(s)
        })
        .collect()
}

fn gt_collides(gt: &[Pose], agents: &[AgentBox], cfg: &ScenarioConfig) -> bool {
    gt.iter().enumerate().any(|(k, p)| {
        let ego = cfg.ego.footprint(p);
        let t = (k + 1) as f64 * cfg.dt_s;
        agents.iter().any(|a| ego.overlaps(&a.footprint_at(t)))
    })
}

/// Would an ego holding its initial speed and heading hit any agent?
pub fn constant_velocity_collides(scene: &Scene, dims: &EgoDims) -> bool {
    let v = scene.ego.speed_mps;
    let (s, c) = scene.ego.heading_rad.sin_cos();
    (1..=scene.horizon_steps()).any(|k| {
        let t = k as f64 * scene.horizon_dt_s;
        let pose = Pose::new(
            scene.ego.position_m[0] + v * t * c,
            scene.ego.position_m[1] + v * t * s,
            scene.ego.heading_rad,
        );
        let ego = dims.footprint(&pose);
        scene
            .agents
            .iter()
            .any(|a| ego.overlaps(&a.footprint_at(t)))
    })
}

fn gt_on_road(gt: &[Pose], drivable: &[Polygon], cfg: &ScenarioConfig) -> bool {
    gt.iter().all(|p| {
        cfg.ego
            .footprint(p)
            .corners()
            .iter()
            .all(|c| in_any(drivable, *c))
    })
}

fn agent(center: Point, heading: f64, class: AgentClass, velocity: Point) -> AgentBox {
    let extent = match class {
        AgentClass::Vehicle => [4.5, 2.0],
        AgentClass::Static => [4.2, 1.9],
        AgentClass::Pedestrian => [0.6, 0.6],
        AgentClass::Cyclist => [1.8, 0.7],
    };
    AgentBox {
        center_m: center,
        heading_rad: heading,
        extent_m: extent,
        velocity_mps: velocity,
        class,
    }
}

struct Draft {
    v0: f64,
    path: Centerline,
    drivable: Vec<Polygon>,
    gt: Vec<Pose>,
    agents: Vec<AgentBox>,
}

fn draft_straight(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Option<Draft> {
    let v0 = rng.gen_range(2.5..6.5);
    let path = Centerline::from_curvature(|_| 0.0);
    let drivable = vec![Polygon::rect(
        PATH_START,
        -ROAD_HALF_WIDTH,
        PATH_END,
        ROAD_HALF_WIDTH,
    )];
    if rng.gen_bool(cfg.hazard_prob) {
        // slower lead vehicle; ego brakes to keep a gap
        let x_lead = rng.gen_range(9.0..15.0);
        let v_lead = v0 * rng.gen_range(0.15..0.5);
        let lead = agent([x_lead, 0.0], 0.0, AgentClass::Vehicle, [v_lead, 0.0]);
        let horizon = cfg.horizon_steps as f64 * cfg.dt_s;
        for step in 1..=12 {
            let a_dec = 0.25 * step as f64;
            let accel = |_t: f64, v: f64| if v > v_lead { -a_dec } else { 0.0 };
            let gt = sample_gt(&path, v0, cfg, accel);
            let min_gap = (1..=cfg.horizon_steps)
                .map(|k| x_lead + v_lead * k as f64 * cfg.dt_s - gt[k - 1].x_m)
                .fold(f64::INFINITY, f64::min);
            let clean =
                crate::metrics::gt_is_clean(&gt, v0, std::slice::from_ref(&lead), &drivable, cfg);
            if min_gap >= 8.0 && clean && v0 * horizon > x_lead + v_lead * horizon - 4.5 {
                return Some(Draft {
                    v0,
                    path,
                    drivable,
                    gt,
                    agents: vec![lead],
                });
            }
        }
        return None;
    }
    let a = rng.gen_range(-0.3..0.3);
    let gt = sample_gt(&path, v0, cfg, |_, _| a);
    Some(Draft {
        v0,
        path,
        drivable,
        gt,
        agents: vec![],
    })
}

fn draft_turn(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, left: bool) -> Option<Draft> {
    let v0 = rng.gen_range(2.5..6.0);
    let s0 = rng.gen_range(1.0..6.0);
    let radius = rng.gen_range(9.0..14.0);
    let sign = if left { 1.0 } else { -1.0 };
    let sweep = std::f64::consts::FRAC_PI_2;
    let path = Centerline::from_curvature(move |s| {
        if s >= s0 && s < s0 + radius * sweep {
            sign / radius
        } else {
            0.0
        }
    });
    let drivable = vec![path.corridor(3.0)];
    let a = rng.gen_range(-0.2..0.2);
    let gt = sample_gt(&path, v0, cfg, |_, _| a);
    let mut agents = vec![];
    if rng.gen_bool(cfg.hazard_prob) {
        // parked vehicle straight ahead, where the road no longer goes
        let horizon = cfg.horizon_steps as f64 * cfg.dt_s;
        let x = rng.gen_range(
            (s0 + radius * 0.7).max(6.0)
                ..(v0 * horizon + 2.0).max(s0 + radius * 0.7 + 1.0).max(7.0),
        );
        agents.push(agent(
            [x, rng.gen_range(-0.5..0.5)],
            0.0,
            AgentClass::Static,
            [0.0, 0.0],
        ));
    }
    Some(Draft {
        v0,
        path,
        drivable,
        gt,
        agents,
    })
}

fn draft_lane_change(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Option<Draft> {
    let v0 = rng.gen_range(3.0..6.5);
    let x0 = rng.gen_range(0.5..3.0);
    let span = v0 * rng.gen_range(2.2..3.0);
    let lateral = move |x: f64| {
        let u = ((x - x0) / span).clamp(0.0, 1.0);
        LANE_WIDTH * (1.0 - (std::f64::consts::PI * u).cos()) / 2.0
    };
    let path = Centerline::from_lateral(lateral);
    let drivable = vec![Polygon::rect(
        PATH_START,
        -ROAD_HALF_WIDTH,
        PATH_END,
        LANE_WIDTH + ROAD_HALF_WIDTH,
    )];
    let gt = sample_gt(&path, v0, cfg, |_, _| 0.0);
    let horizon = cfg.horizon_steps as f64 * cfg.dt_s;
    let lo = (x0 + span * 0.75).max(7.0);
    let x_obs = rng.gen_range(lo..(v0 * horizon + 3.0).max(8.0).max(lo + 1.0));
    let agents = vec![agent([x_obs, 0.0], 0.0, AgentClass::Static, [0.0, 0.0])];
    Some(Draft {
        v0,
        path,
        drivable,
        gt,
        agents,
    })
}

fn draft_yield(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Option<Draft> {
    let v0 = rng.gen_range(2.5..6.5);
    let x_cross = rng.gen_range(10.0..16.0);
    let class = if rng.gen_bool(0.7) {
        AgentClass::Pedestrian
    } else {
        AgentClass::Cyclist
    };
    let speed = match class {
        AgentClass::Pedestrian => rng.gen_range(0.6..1.2),
        _ => rng.gen_range(1.0..1.6),
    };
    let from_right = rng.gen_bool(0.5);
    let y0 = rng.gen_range(2.0..3.5) * if from_right { -1.0 } else { 1.0 };
    let vy: f64 = if from_right { speed } else { -speed };
    let crosser = agent([x_cross, y0], vy.atan2(0.0), class, [0.0, vy]);
    let path = Centerline::from_curvature(|_| 0.0);
    let drivable = vec![Polygon::rect(
        PATH_START,
        -ROAD_HALF_WIDTH,
        PATH_END,
        ROAD_HALF_WIDTH,
    )];
    let stop_at = x_cross - cfg.ego.length_m / 2.0 - 3.0;
    if stop_at <= 1.0 {
        return None;
    }
    let a_dec = v0 * v0 / (2.0 * stop_at);
    if a_dec > 3.0 {
        return None;
    }
    let gt = sample_gt(
        &path,
        v0,
        cfg,
        move |_, v| if v > 0.0 { -a_dec } else { 0.0 },
    );
    Some(Draft {
        v0,
        path,
        drivable,
        gt,
        agents: vec![crosser],
    })
}

fn add_background(rng: &mut ChaCha8Rng, draft: &mut Draft, cfg: &ScenarioConfig) {
    let n = rng.gen_range(0..=2usize);
    for _ in 0..n {
        if draft.agents.len() >= cfg.max_agents {
            break;
        }
        for _try in 0..10 {
            let s = rng.gen_range(0.0..30.0);
            let base = draft.path.at(s);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let off = ROAD_HALF_WIDTH + rng.gen_range(2.0..4.5);
            let (sn, cs) = base.heading_rad.sin_cos();
            let center = [base.x_m - sn * off * side, base.y_m + cs * off * side];
            let walker = rng.gen_bool(0.3);
            let a = if walker {
                let v = rng.gen_range(0.5..1.3);
                agent(
                    center,
                    base.heading_rad,
                    AgentClass::Pedestrian,
                    [cs * v, sn * v],
                )
            } else {
                agent(center, base.heading_rad, AgentClass::Static, [0.0, 0.0])
            };
            let horizon = cfg.horizon_steps as f64 * cfg.dt_s;
            let off_road = [0.0, horizon].iter().all(|&t| {
                a.footprint_at(t)
                    .corners()
                    .iter()
                    .all(|c| !in_any(&draft.drivable, *c))
            });
            let start = cfg.ego.footprint(&Pose::new(0.0, 0.0, 0.0));
            let mut with = draft.agents.clone();
            with.push(a);
            if off_road
                && !start.overlaps(&a.footprint_at(0.0))
                && crate::metrics::gt_is_clean(&draft.gt, draft.v0, &with, &draft.drivable, cfg)
            {
                draft.agents.push(a);
                break;
            }
        }
    }
}

fn profile_salt(p: Profile) -> u64 {
    match p {
        Profile::Straight => 0x51,
        Profile::LeftTurn => 0x52,
        Profile::RightTurn => 0x53,
        Profile::LaneChange => 0x54,
        Profile::Yield => 0x55,
    }
}

/// Deterministic scene for `(seed, profile)`.
pub fn generate_scenario(seed: u64, profile: Profile, cfg: &ScenarioConfig) -> Scene {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ profile_salt(profile));
    let start = cfg.ego.footprint(&Pose::new(0.0, 0.0, 0.0));
    let mut attempt = 0u32;
    let draft = loop {
        attempt += 1;
        let d = match profile {
            Profile::Straight => draft_straight(&mut rng, cfg),
            Profile::LeftTurn => draft_turn(&mut rng, cfg, true),
            Profile::RightTurn => draft_turn(&mut rng, cfg, false),
            Profile::LaneChange => draft_lane_change(&mut rng, cfg),
            Profile::Yield => draft_yield(&mut rng, cfg),
        };
        let Some(mut d) = d else { continue };
        let ok = !gt_collides(&d.gt, &d.agents, cfg)
            && gt_on_road(&d.gt, &d.drivable, cfg)
            && d.agents
                .iter()
                .all(|a| !start.overlaps(&a.footprint_at(0.0)))
            && crate::metrics::gt_is_clean(&d.gt, d.v0, &d.agents, &d.drivable, cfg);
        if !ok {
            assert!(attempt < 1000, "scenario generator failed to converge");
            continue;
        }
        add_background(&mut rng, &mut d, cfg);
        break d;
    };
    Scene {
        schema: SCENE_SCHEMA.to_string(),
        id: format!("{}-{seed}", profile.name()),
        profile,
        horizon_dt_s: cfg.dt_s,
        ego: EgoState {
            position_m: [0.0, 0.0],
            heading_rad: 0.0,
            speed_mps: draft.v0,
        },
        agents: draft.agents,
        drivable: draft.drivable,
        gt_trajectory: draft.gt,
    }
}

/// `count` scenes cycling through `profiles`; scene `i` uses seed
/// `base_seed * 1_000_003 + i`.
pub fn generate_corpus(
    base_seed: u64,
    count: usize,
    profiles: &[Profile],
    cfg: &ScenarioConfig,
) -> Result<Vec<Scene>> {
    if profiles.is_empty() {
        return Err(Error::invalid("at least one profile is required"));
    }
    Ok((0..count)
        .map(|i| {
            let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            generate_scenario(seed, profiles[i % profiles.len()], cfg)
        })
        .collect())
}
