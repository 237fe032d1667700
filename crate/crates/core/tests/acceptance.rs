//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use anchorplan::anchors::{cluster_anchors, AnchorBank};
use anchorplan::autodiff::Graph;
use anchorplan::experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
use anchorplan::gradcheck::{gradient_check, GradCheckConfig};
use anchorplan::metrics::{
    aggregate_pdms, closed_loop_scores, score_plan, MetricsConfig, PdmsWeights, RouteResult,
    SubScores,
};
use anchorplan::model::{Model, ModelConfig};
use anchorplan::nn::{Activation, ParamStore};
use anchorplan::perception::{gather_windows, GridTarget, HolisticPerception, PerceptionConfig};
use anchorplan::planner::Decoding;
use anchorplan::raster::{CameraConfig, RasterConfig};
use anchorplan::scenario::{
    generate_corpus, generate_scenario, Pose, Profile, ScenarioConfig, Scene,
};
use anchorplan::sim::replay_open_loop;
use anchorplan::tensor::Tensor;
use anchorplan::trainer::{evaluate_loss, prepare_samples, scene_loss, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: usize, name: &str, elapsed: Duration, v: &Verdict) {
    println!(
        "criterion {id} {:<28} {} [{:.1}s] {}",
        name,
        if v.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        v.detail
    );
}

fn bank_from(scenes: &[Scene], modes: usize, seed: u64) -> AnchorBank {
    let gts: Vec<Vec<Pose>> = scenes.iter().map(|s| s.gt_trajectory.clone()).collect();
    cluster_anchors(&gts, modes, seed, 100).unwrap().0
}

fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(
        vec![r, c],
        (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn identity_at_init() -> Verdict {
    let cfg = ScenarioConfig::default();
    let scenes = generate_corpus(101, 100, &Profile::ALL, &cfg).unwrap();
    let bank = bank_from(&scenes, 20, 0);
    let model = Model::new(ModelConfig::default(), bank.clone()).unwrap();
    let flat = bank.flat();
    let mut mismatched = 0;
    for s in &scenes {
        let out = model.plan(s).unwrap();
        for (m, traj) in out.trajectories.iter().enumerate() {
            let got: Vec<f64> = traj.iter().flat_map(|p| p.to_array()).collect();
            if bits(&got) != bits(&flat[m]) {
                mismatched += 1;
            }
        }
    }
    let mc = MetricsConfig::default();
    let replay = replay_open_loop(&scenes, &model, &mc).unwrap();
    let baseline: Vec<_> = scenes
        .iter()
        .map(|s| score_plan(&bank.anchors[0], s, &mc).unwrap())
        .collect();
    let same_reports = replay.reports == baseline;
    Verdict::new(
        mismatched == 0 && same_reports,
        format!(
            "scenes=100 modes=20 mismatched_trajectories={mismatched} replay_equals_anchor_baseline={same_reports}"
        ),
    )
}

fn tiny_model_config(decoding: Decoding) -> ModelConfig {
    let mut cfg = ModelConfig::compact(3, 4);
    cfg.encoder.channels = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.agent_slots = 2;
    cfg.encoder.raster = RasterConfig {
        rows: 16,
        cols: 16,
        meters_per_cell: 2.0,
        rows_behind: 2,
        origin_m: [0.0, 0.0],
    };
    cfg.encoder.camera = CameraConfig {
        width_px: 8,
        height_px: 4,
        focal_px: 4.0,
        ..CameraConfig::default()
    };
    cfg.planner.perception.channels = 8;
    cfg.planner.perception.heads = 2;
    cfg.planner.perception.bev_window = 1;
    cfg.planner.perception.img_window = 1;
    cfg.planner.decoding = decoding;
    cfg
}

fn gradient_suite() -> Verdict {
    let scen = ScenarioConfig {
        horizon_steps: 4,
        ..ScenarioConfig::default()
    };
    let scenes = generate_corpus(202, 12, &Profile::ALL, &scen).unwrap();
    let bank = bank_from(&scenes, 3, 1);
    let mut details = Vec::new();
    let mut pass = true;
    for decoding in [Decoding::Autoregressive, Decoding::OneShot] {
        let mut model = Model::new(tiny_model_config(decoding), bank.clone()).unwrap();
        // move off the zero-initialized heads so every path carries gradient
        perturb(&mut model.store, 5, 0.05);
        let sample = prepare_samples(&model, &scenes[..1]).unwrap().remove(0);
        let tc = TrainConfig::default();
        let gc = GradCheckConfig {
            max_elements: 600,
            ..GradCheckConfig::default()
        };
        let r = gradient_check(
            &model.store,
            |g, store| Ok(scene_loss(g, &model, store, &sample, &tc)?.total),
            &gc,
        )
        .unwrap();
        let ok = r.passed && r.checked >= 500 && r.max_rel_error < 1e-4;
        pass &= ok;
        details.push(format!(
            "{decoding:?}: checked={} of {} max_rel={:.2e} kinks={}",
            r.checked,
            model.store.num_elements(),
            r.max_rel_error,
            r.kinks_shifted
        ));
    }
    Verdict::new(pass, details.join("; "))
}

fn pdms_oracle(s: [f64; 5], w: [f64; 3]) -> f64 {
    // s = (nc, dac, ttc, comfort, ep), w = (ep, ttc, comfort)
    let mut penalty = 1.0;
    for v in [s[0], s[1]] {
        penalty *= v;
    }
    let terms = [(w[0], s[4]), (w[1], s[2]), (w[2], s[3])];
    let num: f64 = terms.iter().map(|(wi, si)| wi * si).sum();
    let den: f64 = terms.iter().map(|(wi, _)| wi).sum();
    penalty * num / den
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let sub = |rng: &mut ChaCha8Rng| -> [f64; 5] {
        let mut s = [0.0; 5];
        for v in &mut s {
            *v = match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                2 => 0.5,
                _ => rng.gen_range(0.0..=1.0),
            };
        }
        s
    };
    let mut max_err: f64 = 0.0;
    let mut zero_ok = true;
    for _ in 0..10_000 {
        let s = sub(&mut rng);
        let mut w = [0.0; 3];
        while w.iter().sum::<f64>() == 0.0 {
            for v in &mut w {
                *v = if rng.gen_bool(0.1) {
                    0.0
                } else {
                    rng.gen_range(0.0..10.0)
                };
            }
        }
        let got = aggregate_pdms(
            &SubScores::new(s[0], s[1], s[2], s[3], s[4]).unwrap(),
            &PdmsWeights {
                ep: w[0],
                ttc: w[1],
                comfort: w[2],
            },
        )
        .unwrap();
        max_err = max_err.max((got - pdms_oracle(s, w)).abs());
        if s[0] * s[1] == 0.0 && got != 0.0 {
            zero_ok = false;
        }
    }
    let w = PdmsWeights::default();
    let mut monotone = true;
    for _ in 0..1_000 {
        let s = sub(&mut rng);
        let i = rng.gen_range(0..5);
        let mut t = s;
        t[i] = rng.gen_range(s[i]..=1.0);
        let a = aggregate_pdms(&SubScores::new(s[0], s[1], s[2], s[3], s[4]).unwrap(), &w).unwrap();
        let b = aggregate_pdms(&SubScores::new(t[0], t[1], t[2], t[3], t[4]).unwrap(), &w).unwrap();
        monotone &= b >= a;
    }
    let mut ds_err: f64 = 0.0;
    let mut sr_err: f64 = 0.0;
    for _ in 0..1_000 {
        let n = rng.gen_range(1..20);
        let routes: Vec<RouteResult> = (0..n)
            .map(|i| RouteResult {
                route_id: format!("r{i}"),
                completion: rng.gen_range(0.0..=100.0),
                penalties: (0..rng.gen_range(0..4))
                    .map(|_| rng.gen_range(0.05..=1.0))
                    .collect(),
                success: rng.gen_bool(0.4),
            })
            .collect();
        let (ds, sr) = closed_loop_scores(&routes).unwrap();
        let mut ds_ref = 0.0;
        let mut succ = 0.0;
        for r in &routes {
            let mut p = 1.0;
            for q in &r.penalties {
                p *= q;
            }
            ds_ref += r.completion * p;
            if r.success {
                succ += 1.0;
            }
        }
        ds_err = ds_err.max((ds - ds_ref / n as f64).abs());
        sr_err = sr_err.max((sr - succ / n as f64).abs());
    }
    let pass = max_err <= 1e-12 && zero_ok && monotone && ds_err <= 1e-12 && sr_err <= 1e-12;
    Verdict::new(
        pass,
        format!(
            "pdms_max_err={max_err:.1e} zero_penalty={zero_ok} monotone={monotone} ds_err={ds_err:.1e} sr_err={sr_err:.1e}"
        ),
    )
}

fn circular_mean(hs: &[f64]) -> f64 {
    let (s, c) = hs
        .iter()
        .fold((0.0, 0.0), |(s, c), h| (s + h.sin(), c + h.cos()));
    s.atan2(c)
}

fn kmeans_invariants() -> Verdict {
    let scenes = generate_corpus(404, 400, &Profile::ALL, &ScenarioConfig::default()).unwrap();
    let all: Vec<Vec<Pose>> = scenes.iter().map(|s| s.gt_trajectory.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut monotone = true;
    let mut converged = 0;
    let mut max_mean_err: f64 = 0.0;
    for seed in 0..50u64 {
        let n = rng.gen_range(40..200);
        let trajs: Vec<Vec<Pose>> = all.choose_multiple(&mut rng, n).cloned().collect();
        let m = rng.gen_range(2..12);
        let (bank, trace) = cluster_anchors(&trajs, m, seed, 200).unwrap();
        monotone &= trace.objective.windows(2).all(|w| w[1] <= w[0]);
        if !trace.converged {
            continue;
        }
        converged += 1;
        for (k, anchor) in bank.anchors.iter().enumerate() {
            let members: Vec<&Vec<Pose>> = trajs
                .iter()
                .zip(&trace.assignment)
                .filter(|(_, &a)| a == k)
                .map(|(t, _)| t)
                .collect();
            for (t, p) in anchor.iter().enumerate() {
                let c = members.len() as f64;
                let mx = members.iter().map(|m| m[t].x_m).sum::<f64>() / c;
                let my = members.iter().map(|m| m[t].y_m).sum::<f64>() / c;
                let hs: Vec<f64> = members.iter().map(|m| m[t].heading_rad).collect();
                let dh = (circular_mean(&hs) - p.heading_rad).sin().abs();
                max_mean_err = max_mean_err
                    .max((mx - p.x_m).abs())
                    .max((my - p.y_m).abs())
                    .max(dh);
            }
        }
    }
    let same = vec![all[3].clone(); 9];
    let (one, tr1) = cluster_anchors(&same, 1, 7, 50).unwrap();
    let identical_ok = one.anchors[0] == all[3] && tr1.objective.last() == Some(&0.0);
    let distinct: Vec<Vec<Pose>> = all[..10].to_vec();
    let (full, trn) = cluster_anchors(&distinct, 10, 7, 50).unwrap();
    let mut used: Vec<usize> = full
        .anchors
        .iter()
        .filter_map(|a| distinct.iter().position(|d| d == a))
        .collect();
    used.sort_unstable();
    used.dedup();
    let m_eq_n_ok = used.len() == 10 && trn.objective.last() == Some(&0.0);
    let pass = monotone && converged == 50 && max_mean_err <= 1e-9 && identical_ok && m_eq_n_ok;
    Verdict::new(
        pass,
        format!(
            "runs=50 converged={converged} monotone={monotone} centroid_err={max_mean_err:.1e} identical={identical_ok} m_eq_n={m_eq_n_ok}"
        ),
    )
}

struct PerceptionCase {
    store: ParamStore,
    p: HolisticPerception,
    raster: RasterConfig,
    camera: CameraConfig,
}

fn perception_case(rng: &mut ChaCha8Rng) -> PerceptionCase {
    let heads = [1usize, 2, 4][rng.gen_range(0..3)];
    let c = heads * 4 * rng.gen_range(1..4);
    let cfg = PerceptionConfig {
        channels: c,
        heads,
        bev_window: rng.gen_range(0..3),
        img_window: rng.gen_range(0..3),
        disrel_width: None,
        activation: if rng.gen_bool(0.5) {
            Activation::Gelu
        } else {
            Activation::Relu
        },
    };
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
    let p = HolisticPerception::new(&mut store, &mut init, "p", cfg).unwrap();
    let raster = RasterConfig {
        rows: rng.gen_range(6..20),
        cols: rng.gen_range(6..20),
        meters_per_cell: rng.gen_range(0.5..2.5),
        rows_behind: rng.gen_range(0..4),
        origin_m: [0.0, 0.0],
    };
    let camera = CameraConfig {
        width_px: rng.gen_range(6..20),
        height_px: rng.gen_range(4..12),
        focal_px: rng.gen_range(3.0..10.0),
        ..CameraConfig::default()
    };
    PerceptionCase {
        store,
        p,
        raster,
        camera,
    }
}

fn random_points(
    rng: &mut ChaCha8Rng,
    modes: usize,
    per_mode: usize,
    r: &RasterConfig,
) -> Vec<Vec<[f64; 3]>> {
    (0..modes)
        .map(|_| {
            (0..per_mode)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..r.x_max() + 2.0),
                        rng.gen_range(-r.y_max() - 2.0..r.y_max() + 2.0),
                        rng.gen_range(-0.5..0.5),
                    ]
                })
                .collect()
        })
        .collect()
}

fn mode_equivariance(rng: &mut ChaCha8Rng, scenes: &[Scene]) -> bool {
    let modes = rng.gen_range(2..7);
    let mut cfg = ModelConfig::compact(modes, 8);
    cfg.planner.decoding = if rng.gen_bool(0.5) {
        Decoding::Autoregressive
    } else {
        Decoding::OneShot
    };
    cfg.planner.chain_refined = rng.gen_bool(0.3);
    cfg.init_seed = rng.gen();
    let bank = bank_from(scenes, modes, rng.gen());
    let mut perm: Vec<usize> = (0..modes).collect();
    perm.shuffle(rng);
    let mut permuted = bank.clone();
    permuted.anchors = perm.iter().map(|&i| bank.anchors[i].clone()).collect();
    permuted.cluster_sizes = perm.iter().map(|&i| bank.cluster_sizes[i]).collect();
    let seed: u64 = rng.gen();
    let mut a = Model::new(cfg.clone(), bank).unwrap();
    let mut b = Model::new(cfg, permuted).unwrap();
    perturb(&mut a.store, seed, 0.05);
    perturb(&mut b.store, seed, 0.05);
    let scene = &scenes[rng.gen_range(0..scenes.len())];
    let (pa, pb) = (a.plan(scene).unwrap(), b.plan(scene).unwrap());
    perm.iter().enumerate().all(|(j, &i)| {
        pb.trajectories[j] == pa.trajectories[i] && pb.scores[j].to_bits() == pa.scores[i].to_bits()
    })
}

fn locality(rng: &mut ChaCha8Rng) -> bool {
    let case = perception_case(rng);
    let c = case.p.cfg.channels;
    let modes = rng.gen_range(1..5);
    let per_mode = rng.gen_range(1..4);
    let pts = random_points(rng, modes, per_mode, &case.raster);
    let q = rand_tensor(rng, modes, c, 1.0);
    let mut ok = true;
    for bev in [true, false] {
        let (target, cells, w) = if bev {
            (
                GridTarget::Bev(&case.raster),
                case.raster.cells(),
                case.p.cfg.bev_window,
            )
        } else {
            (
                GridTarget::Camera(&case.camera),
                case.camera.pixels(),
                case.p.cfg.img_window,
            )
        };
        let win = gather_windows(&pts, target, w);
        let grid = rand_tensor(rng, cells, c, 1.0);
        let mut edited = grid.clone();
        for r in 0..cells {
            if !win.rows.contains(&r) {
                for v in edited.row_mut(r) {
                    *v += rng.gen_range(-5.0..5.0);
                }
            }
        }
        let run = |grid: &Tensor| {
            let mut g = Graph::new();
            let gv = g.constant(grid.clone());
            let qv = g.constant(q.clone());
            let out = if bev {
                let k = case.p.bev_keys(&mut g, &case.store, gv);
                case.p.bev_attention(&mut g, &case.store, qv, k, &win)
            } else {
                let k = case.p.image_keys(&mut g, &case.store, gv);
                case.p.image_attention(&mut g, &case.store, qv, k, &win)
            };
            g.value(out).clone()
        };
        ok &= bits(run(&grid).data()) == bits(run(&edited).data());
    }
    ok
}

fn agent_permutation(rng: &mut ChaCha8Rng) -> f64 {
    let case = perception_case(rng);
    let c = case.p.cfg.channels;
    let (m, a) = (rng.gen_range(1..5), rng.gen_range(1..7));
    let q = rand_tensor(rng, m, c, 1.0);
    let pts = rand_tensor(rng, m, 3, 10.0);
    let f_agent = rand_tensor(rng, a, c, 1.0);
    let boxes = rand_tensor(rng, a, 6, 10.0);
    let mut perm: Vec<usize> = (0..a).collect();
    perm.shuffle(rng);
    let permute = |t: &Tensor| {
        Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let run = |f: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let (qv, pv, fv, bv) = (
            g.constant(q.clone()),
            g.constant(pts.clone()),
            g.constant(f.clone()),
            g.constant(b.clone()),
        );
        let d = case.p.relative_distance(&mut g, &case.store, pv, bv);
        let out = case
            .p
            .agent_attention(&mut g, &case.store, qv, Some(fv), Some(d));
        g.value(out).clone()
    };
    run(&f_agent, &boxes).max_abs_diff(&run(&permute(&f_agent), &permute(&boxes)))
}

fn translation(rng: &mut ChaCha8Rng) -> f64 {
    let case = perception_case(rng);
    let (m, a) = (rng.gen_range(1..5), rng.gen_range(1..7));
    let pts = rand_tensor(rng, m, 3, 20.0);
    let boxes = rand_tensor(rng, a, 6, 20.0);
    let d = [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)];
    let shift = |t: &Tensor| {
        let mut s = t.clone();
        for r in 0..s.rows() {
            let row = s.row_mut(r);
            row[0] += d[0];
            row[1] += d[1];
        }
        s
    };
    let run = |p: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let (pv, bv) = (g.constant(p.clone()), g.constant(b.clone()));
        let out = case.p.relative_distance(&mut g, &case.store, pv, bv);
        g.value(out).clone()
    };
    run(&pts, &boxes).max_abs_diff(&run(&shift(&pts), &shift(&boxes)))
}

fn perception_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let scenes: Vec<Scene> = (0..60)
        .map(|i| {
            generate_scenario(
                5050 + i,
                Profile::ALL[i as usize % 5],
                &ScenarioConfig::default(),
            )
        })
        .collect();
    let equivariant = (0..100)
        .filter(|_| mode_equivariance(&mut rng, &scenes))
        .count();
    let local = (0..100).filter(|_| locality(&mut rng)).count();
    let perm_err = (0..100)
        .map(|_| agent_permutation(&mut rng))
        .fold(0.0, f64::max);
    let trans_err = (0..100).map(|_| translation(&mut rng)).fold(0.0, f64::max);
    let pass = equivariant == 100 && local == 100 && perm_err <= 1e-12 && trans_err <= 1e-9;
    Verdict::new(
        pass,
        format!(
            "mode_equivariant={equivariant}/100 local={local}/100 agent_perm_err={perm_err:.1e} translation_err={trans_err:.1e}"
        ),
    )
}

fn desk_config(decoding: Decoding) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.corpus_seed = 606;
    cfg.model.planner.decoding = decoding;
    cfg
}

fn overfit_ratio() -> f64 {
    let scenes = generate_corpus(607, 60, &Profile::ALL, &ScenarioConfig::default()).unwrap();
    let bank = bank_from(&scenes, 6, 0);
    let model = Model::new(ModelConfig::compact(6, 8), bank).unwrap();
    let sample = prepare_samples(&model, &scenes[..1]).unwrap().remove(0);
    let cfg = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    let before = evaluate_loss(&model, &sample, &cfg).unwrap().l_reg;
    let mut tr = Trainer::new(model, cfg.clone()).unwrap();
    for _ in 0..200 {
        tr.train_step(&[&sample]).unwrap();
    }
    evaluate_loss(&tr.model, &sample, &cfg).unwrap().l_reg / before
}

fn desk_training(ar: &ExperimentOutcome, elapsed: Duration) -> Verdict {
    let t0 = Instant::now();
    let ratio = overfit_ratio();
    let total = elapsed + t0.elapsed();
    let (b, t) = (&ar.baseline.summary, &ar.trained.summary);
    let l2_gain = 1.0 - t.l2_avg_m / b.l2_avg_m;
    let pass =
        l2_gain >= 0.25 && t.mean_pdms > b.mean_pdms && ratio <= 0.10 && total.as_secs() < 30 * 60;
    Verdict::new(
        pass,
        format!(
            "heldout_l2 {:.3}->{:.3} ({:+.1}%) pdms {:.4}->{:.4} overfit_l_reg_ratio={ratio:.4} runtime={:.0}s",
            b.l2_avg_m,
            t.l2_avg_m,
            -100.0 * l2_gain,
            b.mean_pdms,
            t.mean_pdms,
            total.as_secs_f64()
        ),
    )
}

fn ablation(ar: &ExperimentOutcome, nar: &ExperimentOutcome) -> Verdict {
    let (a, n) = (&ar.trained.summary, &nar.trained.summary);
    let better = if a.mean_pdms > n.mean_pdms {
        "autoregressive"
    } else if a.mean_pdms < n.mean_pdms {
        "one-shot"
    } else {
        "tie"
    };
    Verdict::new(
        true,
        format!(
            "autoregressive pdms={:.4} l2={:.3} | one-shot pdms={:.4} l2={:.3} | higher pdms: {better}",
            a.mean_pdms, a.l2_avg_m, n.mean_pdms, n.l2_avg_m
        ),
    )
}

fn fingerprint(o: &ExperimentOutcome) -> (String, String, String) {
    let ckpt = o.checkpoint.to_json().unwrap();
    let plans = serde_json::to_string(&o.plans).unwrap();
    let report = serde_json::to_string(&(&o.trained, &o.baseline)).unwrap();
    (ckpt, plans, report)
}

fn main() -> ExitCode {
    let mut all = true;
    let mut check =
        |id: usize, name: &str, f: &mut dyn FnMut() -> Verdict, limit: Option<Duration>| {
            let t0 = Instant::now();
            let mut v = f();
            let e = t0.elapsed();
            if let Some(limit) = limit {
                if e > limit {
                    v.pass = false;
                    v.detail
                        .push_str(&format!(" runtime over {}s", limit.as_secs()));
                }
            }
            report(id, name, e, &v);
            all &= v.pass;
        };
    check(
        1,
        "identity-at-init",
        &mut identity_at_init,
        Some(Duration::from_secs(10)),
    );
    check(
        2,
        "gradient-check",
        &mut gradient_suite,
        Some(Duration::from_secs(120)),
    );
    check(3, "metric-oracle", &mut metric_oracle, None);
    check(4, "kmeans-invariants", &mut kmeans_invariants, None);
    check(5, "perception-properties", &mut perception_properties, None);

    let t0 = Instant::now();
    let ar = run_experiment(&desk_config(Decoding::Autoregressive), &mut |_, _| {}).unwrap();
    let ar_time = t0.elapsed();
    check(
        6,
        "desk-training",
        &mut || desk_training(&ar, ar_time),
        None,
    );

    let nar = run_experiment(&desk_config(Decoding::OneShot), &mut |_, _| {}).unwrap();
    check(7, "ar-vs-nar-ablation", &mut || ablation(&ar, &nar), None);

    check(
        8,
        "determinism",
        &mut || {
            let again =
                run_experiment(&desk_config(Decoding::Autoregressive), &mut |_, _| {}).unwrap();
            let (a, b) = (fingerprint(&ar), fingerprint(&again));
            Verdict::new(
                a == b,
                format!(
                    "checkpoint_identical={} plans_identical={} reports_identical={}",
                    a.0 == b.0,
                    a.1 == b.1,
                    a.2 == b.2
                ),
            )
        },
        None,
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
