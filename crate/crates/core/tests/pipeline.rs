use anchorplan::anchors::cluster_anchors;
use anchorplan::experiment::{run_experiment, ExperimentConfig};
use anchorplan::model::Model;
use anchorplan::planner::{Decoding, PlanRecord};
use anchorplan::scenario::{generate_corpus, Profile, ScenarioConfig};
use anchorplan::trainer::{evaluate_loss, prepare_samples, Trainer};

fn small(decoding: Decoding) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.scenes = 24;
    cfg.holdout = 6;
    cfg.model.planner.modes = 4;
    cfg.model.planner.decoding = decoding;
    cfg.train.epochs = 2;
    cfg
}

#[test]
fn experiment_runs_for_both_decodings() {
    for decoding in [Decoding::Autoregressive, Decoding::OneShot] {
        let cfg = small(decoding);
        let mut steps = 0;
        let out = run_experiment(&cfg, &mut |_, b| {
            assert!(b.total.is_finite());
            steps += 1;
        })
        .unwrap();
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(steps, 2 * 18usize.div_ceil(cfg.train.batch_size));
        assert_eq!(out.plans.len(), 6);
        assert_eq!(out.trained.reports.len(), 6);
        assert_eq!(out.anchors.modes, 4);
        for p in &out.plans {
            assert_eq!(p.decoding, decoding);
            let back = PlanRecord::from_json(&serde_json::to_string(p).unwrap()).unwrap();
            assert_eq!(&back, p);
        }
    }
}

#[test]
fn repeated_steps_reduce_loss_on_a_fixed_batch() {
    let cfg = small(Decoding::Autoregressive);
    let scenes = generate_corpus(3, 4, &Profile::ALL, &ScenarioConfig::default()).unwrap();
    let gts: Vec<_> = scenes.iter().map(|s| s.gt_trajectory.clone()).collect();
    let (bank, _) = cluster_anchors(&gts, 4, 0, 50).unwrap();
    let model = Model::new(cfg.model.clone(), bank).unwrap();
    let samples = prepare_samples(&model, &scenes).unwrap();
    let mut train = cfg.train.clone();
    train.lr = 1e-3;
    let before: f64 = samples
        .iter()
        .map(|s| evaluate_loss(&model, s, &train).unwrap().total)
        .sum();
    let mut trainer = Trainer::new(model, train.clone()).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    for _ in 0..30 {
        trainer.train_step(&batch).unwrap();
    }
    let after: f64 = samples
        .iter()
        .map(|s| evaluate_loss(&trainer.model, s, &train).unwrap().total)
        .sum();
    assert!(after < 0.8 * before, "loss {before} -> {after}");
}

#[test]
fn saved_model_reloads_with_identical_plans() {
    let cfg = small(Decoding::OneShot);
    let out = run_experiment(&cfg, &mut |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Model::new(cfg.model.clone(), out.anchors.clone()).unwrap();
    out.checkpoint.load_into(&mut model.store).unwrap();
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let scenes =
        generate_corpus(cfg.corpus_seed, cfg.scenes, &Profile::ALL, &cfg.scenario).unwrap();
    for (s, rec) in scenes[18..].iter().zip(&out.plans) {
        let plan = loaded.plan(s).unwrap();
        assert_eq!(PlanRecord::new(&s.id, Decoding::OneShot, plan), *rec);
    }
}
