//! Planning metrics: PDMS subscores and aggregation, driving score and
//! success rate over routes, open-loop L2 and collision rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{in_any, wrap_angle, Obb, Point, Polygon};
use crate::scenario::{AgentBox, EgoDims, EgoState, Pose, ScenarioConfig, Scene};

pub const REPORT_SCHEMA: &str = "anchorplan-report/v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdmsWeights {
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
}

impl Default for PdmsWeights {
    fn default() -> Self {
        Self {
            ep: 5.0,
            ttc: 5.0,
            comfort: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub ego: EgoDims,
    pub ttc_horizon_s: f64,
    pub ttc_samples: usize,
    pub max_accel_mps2: f64,
    pub max_yaw_rate_rps: f64,
    pub weights: PdmsWeights,
    pub horizons_s: Vec<f64>,
    /// Below this GT progress (m) any plan gets full progress credit.
    pub min_gt_progress_m: f64,
    pub collision_penalty: f64,
    pub offroad_penalty: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ego: EgoDims::default(),
            ttc_horizon_s: 1.0,
            ttc_samples: 10,
            max_accel_mps2: 4.0,
            max_yaw_rate_rps: 1.0,
            weights: PdmsWeights::default(),
            horizons_s: vec![1.0, 2.0, 3.0],
            min_gt_progress_m: 0.1,
            collision_penalty: 0.5,
            offroad_penalty: 0.7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
}

impl SubScores {
    pub fn new(nc: f64, dac: f64, ttc: f64, comfort: f64, ep: f64) -> Result<Self> {
        let s = Self {
            nc,
            dac,
            ttc,
            comfort,
            ep,
        };
        for (name, v) in s.named() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "subscore {name}={v} outside [0, 1]"
                )));
            }
        }
        Ok(s)
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("nc", self.nc),
            ("dac", self.dac),
            ("ttc", self.ttc),
            ("comfort", self.comfort),
            ("ep", self.ep),
        ]
    }
}

/// `nc * dac * (w_ep*ep + w_ttc*ttc + w_c*comfort) / (w_ep + w_ttc + w_c)`.
pub fn aggregate_pdms(s: &SubScores, w: &PdmsWeights) -> Result<f64> {
    let ws = [w.ep, w.ttc, w.comfort];
    if ws.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "PDMS weights must be finite and non-negative",
        ));
    }
    let total = w.ep + w.ttc + w.comfort;
    if total == 0.0 {
        return Err(Error::invalid("PDMS weights are all zero"));
    }
    Ok(s.nc * s.dac * (w.ep * s.ep + w.ttc * s.ttc + w.comfort * s.comfort) / total)
}

fn ego_box(dims: &EgoDims, x: f64, y: f64, heading: f64) -> Obb {
    Obb::new([x, y], heading, dims.length_m, dims.width_m)
}

fn hits(ego: &Obb, agents: &[AgentBox], t: f64) -> bool {
    agents.iter().any(|a| ego.overlaps(&a.footprint_at(t)))
}

/// Arc-length position of the projection of `p` onto the polyline.
fn project_on_polyline(line: &[Point], p: Point) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut s_acc = 0.0;
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let len = len2.sqrt();
        let u = if len2 > 0.0 {
            (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + u * d[0], a[1] + u * d[1]];
        let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        if dist < best.0 {
            best = (dist, s_acc + u * len);
        }
        s_acc += len;
    }
    (best.1, s_acc)
}

struct Context<'a> {
    ego: &'a EgoState,
    dt: f64,
    agents: &'a [AgentBox],
    drivable: &'a [Polygon],
    gt: &'a [Pose],
}

fn subscores_in(plan: &[Pose], ctx: &Context, cfg: &MetricsConfig) -> SubScores {
    let dims = &cfg.ego;
    let dt = ctx.dt;
    let mut nc = 1.0;
    let mut dac = 1.0;
    let mut ttc = 1.0;
    let mut comfort = 1.0;

    let mut prev = [
        ctx.ego.position_m[0],
        ctx.ego.position_m[1],
        ctx.ego.heading_rad,
    ];
    let mut prev_speed = ctx.ego.speed_mps;
    for (k, p) in plan.iter().enumerate() {
        let t = (k + 1) as f64 * dt;
        let fp = ego_box(dims, p.x_m, p.y_m, p.heading_rad);
        if hits(&fp, ctx.agents, t) {
            nc = 0.0;
        }
        if !fp.corners().iter().all(|c| in_any(ctx.drivable, *c)) {
            dac = 0.0;
        }
        let vel = [(p.x_m - prev[0]) / dt, (p.y_m - prev[1]) / dt];
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        // finite-difference speed sits mid-interval; the first one is half a step from t=0
        let accel_dt = if k == 0 { dt / 2.0 } else { dt };
        let accel = (speed - prev_speed) / accel_dt;
        let yaw_rate = wrap_angle(p.heading_rad - prev[2]) / dt;
        if accel.abs() > cfg.max_accel_mps2 || yaw_rate.abs() > cfg.max_yaw_rate_rps {
            comfort = 0.0;
        }
        for j in 1..=cfg.ttc_samples {
            let tau = cfg.ttc_horizon_s * j as f64 / cfg.ttc_samples as f64;
            let fwd = ego_box(
                dims,
                p.x_m + vel[0] * tau,
                p.y_m + vel[1] * tau,
                p.heading_rad,
            );
            if hits(&fwd, ctx.agents, t + tau) {
                ttc = 0.0;
                break;
            }
        }
        prev = [p.x_m, p.y_m, p.heading_rad];
        prev_speed = speed;
    }

    let mut line: Vec<Point> = vec![ctx.ego.position_m];
    line.extend(ctx.gt.iter().map(Pose::xy));
    let ep = match plan.last() {
        None => 0.0,
        Some(last) => {
            let (s, total) = project_on_polyline(&line, last.xy());
            if total < cfg.min_gt_progress_m {
                1.0
            } else {
                (s / total).clamp(0.0, 1.0)
            }
        }
    };
    SubScores {
        nc,
        dac,
        ttc,
        comfort,
        ep,
    }
}

fn check_plan(plan: &[Pose]) -> Result<()> {
    if plan
        .iter()
        .any(|p| !(p.x_m.is_finite() && p.y_m.is_finite() && p.heading_rad.is_finite()))
    {
        return Err(Error::NonFinite("planned trajectory is not finite".into()));
    }
    Ok(())
}

/// Subscores of `plan` in `scene`, with agents rolled out at constant velocity.
pub fn compute_subscores(plan: &[Pose], scene: &Scene, cfg: &MetricsConfig) -> Result<SubScores> {
    check_plan(plan)?;
    let ctx = Context {
        ego: &scene.ego,
        dt: scene.horizon_dt_s,
        agents: &scene.agents,
        drivable: &scene.drivable,
        gt: &scene.gt_trajectory,
    };
    Ok(subscores_in(plan, &ctx, cfg))
}

/// True when a candidate ground truth scores full NC, DAC, TTC and comfort.
pub(crate) fn gt_is_clean(
    gt: &[Pose],
    v0: f64,
    agents: &[AgentBox],
    drivable: &[Polygon],
    scenario: &ScenarioConfig,
) -> bool {
    let cfg = MetricsConfig {
        ego: scenario.ego,
        ..MetricsConfig::default()
    };
    let ego = EgoState {
        position_m: [0.0, 0.0],
        heading_rad: 0.0,
        speed_mps: v0,
    };
    let ctx = Context {
        ego: &ego,
        dt: scenario.dt_s,
        agents,
        drivable,
        gt,
    };
    let s = subscores_in(gt, &ctx, &cfg);
    s.nc == 1.0 && s.dac == 1.0 && s.ttc == 1.0 && s.comfort == 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoop {
    pub l2_m: Vec<f64>,
    pub collision: Vec<bool>,
}

impl OpenLoop {
    pub fn l2_avg(&self) -> f64 {
        self.l2_m.iter().sum::<f64>() / self.l2_m.len() as f64
    }
}

/// L2 error and collision flags at each configured horizon. Horizon `h`
/// maps to waypoint `round(h / dt)` (1-based).
pub fn open_loop_metrics(plan: &[Pose], scene: &Scene, cfg: &MetricsConfig) -> Result<OpenLoop> {
    check_plan(plan)?;
    let dt = scene.horizon_dt_s;
    let gt = &scene.gt_trajectory;
    if plan.len() != gt.len() {
        return Err(Error::shape(format!(
            "plan has {} waypoints, ground truth {}",
            plan.len(),
            gt.len()
        )));
    }
    if cfg.horizons_s.is_empty() {
        return Err(Error::invalid("no open-loop horizons configured"));
    }
    let mut first_hit = None;
    for (k, p) in plan.iter().enumerate() {
        let fp = ego_box(&cfg.ego, p.x_m, p.y_m, p.heading_rad);
        if hits(&fp, &scene.agents, (k + 1) as f64 * dt) {
            first_hit = Some(k + 1);
            break;
        }
    }
    let mut out = OpenLoop {
        l2_m: Vec::new(),
        collision: Vec::new(),
    };
    for &h in &cfg.horizons_s {
        let step = (h / dt).round() as usize;
        if step == 0 || step > gt.len() {
            return Err(Error::invalid(format!(
                "horizon {h} s is outside the planning horizon of {} s",
                gt.len() as f64 * dt
            )));
        }
        let (a, b) = (plan[step - 1], gt[step - 1]);
        out.l2_m
            .push(((a.x_m - b.x_m).powi(2) + (a.y_m - b.y_m).powi(2)).sqrt());
        out.collision.push(first_hit.is_some_and(|s| s <= step));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteResult {
    pub route_id: String,
    /// Percent in `[0, 100]`.
    pub completion: f64,
    /// One factor in `(0, 1]` per infraction event.
    pub penalties: Vec<f64>,
    pub success: bool,
}

/// `(ds, sr)`: mean penalized completion and fraction of successful routes.
pub fn closed_loop_scores(routes: &[RouteResult]) -> Result<(f64, f64)> {
    if routes.is_empty() {
        return Err(Error::invalid("no routes to score"));
    }
    let mut ds = 0.0;
    let mut n_success = 0usize;
    for r in routes {
        if !(0.0..=100.0).contains(&r.completion) {
            return Err(Error::invalid(format!(
                "route {}: completion {} outside [0, 100]",
                r.route_id, r.completion
            )));
        }
        if r.penalties.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::invalid(format!(
                "route {}: penalty outside (0, 1]",
                r.route_id
            )));
        }
        ds += r.completion * r.penalties.iter().product::<f64>();
        n_success += r.success as usize;
    }
    let n = routes.len() as f64;
    Ok((ds / n, n_success as f64 / n))
}

/// Per-scene open-loop evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene_id: String,
    pub subscores: SubScores,
    pub pdms: f64,
    pub l2_m: Vec<f64>,
    pub l2_avg_m: f64,
    pub collision: Vec<bool>,
}

pub fn score_plan(plan: &[Pose], scene: &Scene, cfg: &MetricsConfig) -> Result<MetricReport> {
    let subscores = compute_subscores(plan, scene, cfg)?;
    let pdms = aggregate_pdms(&subscores, &cfg.weights)?;
    let ol = open_loop_metrics(plan, scene, cfg)?;
    Ok(MetricReport {
        scene_id: scene.id.clone(),
        subscores,
        pdms,
        l2_avg_m: ol.l2_avg(),
        l2_m: ol.l2_m,
        collision: ol.collision,
    })
}

/// Corpus-level means of per-scene reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema: String,
    pub scenes: usize,
    pub horizons_s: Vec<f64>,
    pub mean_subscores: SubScores,
    pub mean_pdms: f64,
    pub l2_m: Vec<f64>,
    pub l2_avg_m: f64,
    pub collision_rate: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sr: Option<f64>,
}

pub fn summarize(reports: &[MetricReport], cfg: &MetricsConfig) -> Result<ReportSummary> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to summarize"));
    }
    let n = reports.len() as f64;
    let h = cfg.horizons_s.len();
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_subscores = SubScores {
        nc: mean(&|r| r.subscores.nc),
        dac: mean(&|r| r.subscores.dac),
        ttc: mean(&|r| r.subscores.ttc),
        comfort: mean(&|r| r.subscores.comfort),
        ep: mean(&|r| r.subscores.ep),
    };
    let l2_m: Vec<f64> = (0..h).map(|i| mean(&|r| r.l2_m[i])).collect();
    let collision_rate: Vec<f64> = (0..h)
        .map(|i| mean(&|r| if r.collision[i] { 1.0 } else { 0.0 }))
        .collect();
    Ok(ReportSummary {
        schema: REPORT_SCHEMA.to_string(),
        scenes: reports.len(),
        horizons_s: cfg.horizons_s.clone(),
        mean_subscores,
        mean_pdms: mean(&|r| r.pdms),
        l2_avg_m: mean(&|r| r.l2_avg_m),
        l2_m,
        collision_rate,
        ds: None,
        sr: None,
    })
}
