use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchorplan::anchors::{cluster_anchors, AnchorBank};
use anchorplan::experiment::ExperimentConfig;
use anchorplan::metrics::{score_plan, summarize, MetricReport};
use anchorplan::model::Model;
use anchorplan::planner::{Decoding, PlanRecord};
use anchorplan::scenario::{generate_corpus, read_corpus, write_corpus, Pose, Profile, Scene};
use anchorplan::sim::{
    replay_open_loop, simulate_routes, GroundTruthPolicy, OpenLoopReplay, Policy, RunMode,
    StationaryPolicy,
};
use anchorplan::trainer::{prepare_samples, StepLog, Trainer};
use anchorplan::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Anchor-guided trajectory planner: data generation, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "anchorplan", version)]
struct Cli {
    /// JSON configuration; missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene corpus as JSON lines.
    Generate {
        #[arg(long)]
        count: usize,
        /// Comma-separated profiles; all when omitted.
        #[arg(long, value_delimiter = ',')]
        profiles: Vec<Profile>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster ground-truth trajectories into an anchor bank.
    Cluster {
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the planner's mode count.
        #[arg(long)]
        modes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Plan one scene (JSON) or a corpus (JSON lines).
    Plan {
        #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
        scene: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Replaces the checkpoint's anchor bank; shapes must match.
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Must match the decoding the checkpoint was trained with.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a plans file against its corpus.
    Score {
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-scene metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Open-loop replay of a checkpoint over a corpus.
    Replay {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop simulation of every scene in a corpus.
    Simulate {
        #[arg(long)]
        corpus: PathBuf,
        /// Required for the model policy.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Ar,
    Nar,
}

impl From<ModeArg> for Decoding {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ar => Decoding::Autoregressive,
            ModeArg::Nar => Decoding::OneShot,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Model,
    GroundTruth,
    Stationary,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.corpus_seed = seed;
        cfg.anchor_seed = seed;
        cfg.model.init_seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_corpus(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    let scenes = read_corpus(path)?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} holds no scenes",
            path.display()
        )));
    }
    for s in &scenes {
        s.validate(&cfg.scenario)?;
    }
    Ok(scenes)
}

fn load_model(ckpt: &Path, anchors: Option<&Path>, mode: Option<ModeArg>) -> Result<Model> {
    let mut model = Model::load(ckpt)?;
    if let Some(mode) = mode {
        let want = Decoding::from(mode);
        if model.cfg.planner.decoding != want {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained with {:?} decoding, not {want:?}",
                model.cfg.planner.decoding
            )));
        }
    }
    if let Some(path) = anchors {
        let bank = AnchorBank::load(path)?;
        let ckpt = model.checkpoint()?;
        model = Model::new(model.cfg.clone(), bank)?;
        ckpt.load_into(&mut model.store)?;
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate {
            count,
            profiles,
            out,
        } => {
            let profiles = if profiles.is_empty() {
                Profile::ALL.to_vec()
            } else {
                profiles
            };
            let scenes = generate_corpus(cfg.corpus_seed, count, &profiles, &cfg.scenario)?;
            write_corpus(&out, &scenes)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Cluster { corpus, modes, out } => {
            let scenes = load_corpus(&corpus, &cfg)?;
            let gts: Vec<Vec<Pose>> = scenes.iter().map(|s| s.gt_trajectory.clone()).collect();
            let modes = modes.unwrap_or(cfg.model.planner.modes);
            let (bank, trace) = cluster_anchors(&gts, modes, cfg.anchor_seed, cfg.anchor_iters)?;
            bank.save(&out)?;
            eprintln!(
                "{} anchors from {} trajectories, objective {:.4}, converged {}",
                bank.modes,
                gts.len(),
                bank.provenance.objective,
                trace.converged
            );
        }
        Command::Train {
            corpus,
            anchors,
            out,
            log,
        } => {
            let scenes = load_corpus(&corpus, &cfg)?;
            let bank = AnchorBank::load(&anchors)?;
            let model = Model::new(cfg.model.clone(), bank)?;
            let samples = prepare_samples(&model, &scenes)?;
            let mut trainer = Trainer::new(model, cfg.train.clone())?;
            let mut writer = match &log {
                Some(p) => Some(csv::Writer::from_path(p).map_err(std::io::Error::from)?),
                None => None,
            };
            let mut log_err: Option<csv::Error> = None;
            for epoch in 0..cfg.train.epochs {
                let mean = trainer.train_epoch(&samples, &mut |step, b| {
                    if let Some(w) = writer.as_mut() {
                        if let Err(e) = w.serialize(StepLog::new(step, b)) {
                            log_err.get_or_insert(e);
                        }
                    }
                })?;
                if let Some(e) = log_err.take() {
                    return Err(std::io::Error::from(e).into());
                }
                eprintln!(
                    "epoch {:>3} total {:.4} bev {:.4} agent {:.4} reg {:.4} cls {:.4}",
                    epoch + 1,
                    mean.total,
                    mean.l_bev,
                    mean.l_agent,
                    mean.l_reg,
                    mean.l_cls
                );
            }
            if let Some(mut w) = writer {
                w.flush()?;
            }
            trainer.model.save(&out)?;
        }
        Command::Plan {
            scene,
            corpus,
            ckpt,
            anchors,
            mode,
            out,
        } => {
            let model = load_model(&ckpt, anchors.as_deref(), mode)?;
            let decoding = model.cfg.planner.decoding;
            if let Some(path) = scene {
                let s = Scene::from_json(&fs::read_to_string(path)?)?;
                s.validate(&cfg.scenario)?;
                write_json(&out, &PlanRecord::new(&s.id, decoding, model.plan(&s)?))?;
            } else if let Some(path) = corpus {
                let scenes = load_corpus(&path, &cfg)?;
                let mut f = BufWriter::new(fs::File::create(&out)?);
                for s in &scenes {
                    let record = PlanRecord::new(&s.id, decoding, model.plan(s)?);
                    writeln!(f, "{}", serde_json::to_string(&record)?)?;
                }
                f.flush()?;
            }
        }
        Command::Score {
            plans,
            corpus,
            out,
            csv: csv_path,
        } => {
            let scenes = load_corpus(&corpus, &cfg)?;
            let text = fs::read_to_string(&plans)?;
            let records: Vec<PlanRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(PlanRecord::from_json)
                .collect::<Result<_>>()?;
            let reports: Vec<MetricReport> = records
                .iter()
                .map(|r| {
                    let scene = scenes.iter().find(|s| s.id == r.scene_id).ok_or_else(|| {
                        Error::InvalidArgument(format!("scene {} not in corpus", r.scene_id))
                    })?;
                    score_plan(&r.trajectory, scene, &cfg.metrics)
                })
                .collect::<Result<_>>()?;
            let summary = summarize(&reports, &cfg.metrics)?;
            if let Some(p) = csv_path {
                write_report_csv(&p, &reports, &cfg.metrics.horizons_s)?;
            }
            print_summary(&summary);
            write_json(&out, &OpenLoopReplay { reports, summary })?;
        }
        Command::Replay { corpus, ckpt, out } => {
            let scenes = load_corpus(&corpus, &cfg)?;
            let model = load_model(&ckpt, None, None)?;
            let replay = replay_open_loop(&scenes, &model, &cfg.metrics)?;
            print_summary(&replay.summary);
            write_json(&out, &replay)?;
        }
        Command::Simulate {
            corpus,
            ckpt,
            policy,
            out,
        } => {
            let scenes = load_corpus(&corpus, &cfg)?;
            let model = match (policy, &ckpt) {
                (PolicyArg::Model, Some(p)) => Some(load_model(p, None, None)?),
                (PolicyArg::Model, None) => {
                    return Err(Error::InvalidArgument(
                        "the model policy needs --ckpt".into(),
                    ));
                }
                _ => None,
            };
            let policy: &dyn Policy = match (policy, &model) {
                (PolicyArg::Model, Some(m)) => m,
                (PolicyArg::GroundTruth, _) => &GroundTruthPolicy,
                _ => &StationaryPolicy,
            };
            match cfg.run.mode {
                RunMode::ClosedLoop => {
                    let report = simulate_routes(&scenes, policy, &cfg.run, &cfg.metrics)?;
                    eprintln!(
                        "routes {} ds {:.2} sr {:.3}",
                        report.routes.len(),
                        report.ds,
                        report.sr
                    );
                    write_json(&out, &report)?;
                }
                RunMode::OpenLoop => {
                    let replay = replay_open_loop(&scenes, policy, &cfg.metrics)?;
                    print_summary(&replay.summary);
                    write_json(&out, &replay)?;
                }
            }
        }
    }
    Ok(())
}

fn print_summary(s: &anchorplan::metrics::ReportSummary) {
    eprintln!(
        "scenes {} pdms {:.4} l2 {:.3} m nc {:.3} dac {:.3} ttc {:.3} comfort {:.3} ep {:.3}",
        s.scenes,
        s.mean_pdms,
        s.l2_avg_m,
        s.mean_subscores.nc,
        s.mean_subscores.dac,
        s.mean_subscores.ttc,
        s.mean_subscores.comfort,
        s.mean_subscores.ep
    );
}

fn write_report_csv(path: &Path, reports: &[MetricReport], horizons: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    let mut header: Vec<String> = [
        "scene_id", "nc", "dac", "ttc", "comfort", "ep", "pdms", "l2_avg_m",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(horizons.iter().map(|h| format!("l2_{h}s_m")));
    header.extend(horizons.iter().map(|h| format!("collision_{h}s")));
    w.write_record(&header).map_err(std::io::Error::from)?;
    for r in reports {
        let mut row = vec![r.scene_id.clone()];
        row.extend(r.subscores.named().iter().map(|(_, v)| v.to_string()));
        row.push(r.pdms.to_string());
        row.push(r.l2_avg_m.to_string());
        row.extend(r.l2_m.iter().map(|v| v.to_string()));
        row.extend(r.collision.iter().map(|c| (*c as u8).to_string()));
        w.write_record(&row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
