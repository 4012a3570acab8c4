mod common;

use sslseg::datahub::{generate_dataset, LabelMap, LoadedSample};
use sslseg::model::{checkpoint, OptimizerState};
use sslseg::normalization::{stats_report, BnMode, BranchTag};
use sslseg::pipeline::{
    ablate_bn, ablate_data, apply_override, build_batch, init_network, prepare_data, pseudo_label_round, run_pipeline,
    run_schedule, train_step, train_student, train_teacher, write_ablation_csv, ExperimentConfig, LossPlan, Schedule,
    StudentOptions,
};
use sslseg::Error;

use common::{random_sample, tiny_config};

fn samples(n: usize, size: usize, classes: usize, seed: u64) -> Vec<LoadedSample> {
    (0..n).map(|i| random_sample(size, size, classes, seed + i as u64)).collect()
}

fn bank_sums(net: &sslseg::model::MicroSegNet) -> (Vec<u64>, Vec<u64>) {
    (
        net.norms.iter().map(|n| n.weak.checksum()).collect(),
        net.norms.iter().map(|n| n.strong.checksum()).collect(),
    )
}

#[test]
fn sub_batches_stay_on_their_branch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let pool = samples(4, 16, 3, 0);
    let mut net = init_network(&cfg).unwrap();
    net.init_pbn();
    let mut opt = OptimizerState::new(&net, &cfg.train.optim(), 10).unwrap();
    let plan = LossPlan::from_config(&cfg);
    let weak = build_batch(&pool, &[0, 1], false, &cfg, [0.5; 3], &[1]).unwrap();
    let strong = build_batch(&pool, &[2, 3], true, &cfg, [0.5; 3], &[2]).unwrap();
    assert_eq!((weak.tag, strong.tag), (BranchTag::Weak, BranchTag::Strong));

    let (w0, s0) = bank_sums(&net);
    train_step(&mut net, &mut opt, Some(&weak), None, &plan).unwrap();
    let (w1, s1) = bank_sums(&net);
    assert_eq!(s0, s1);
    assert!(w0.iter().zip(&w1).all(|(a, b)| a != b));

    train_step(&mut net, &mut opt, None, Some(&strong), &plan).unwrap();
    let (w2, s2) = bank_sums(&net);
    assert_eq!(w1, w2);
    assert!(s1.iter().zip(&s2).all(|(a, b)| a != b));
    assert!(net.norms.iter().all(|n| n.weak_updates() == 1 && n.strong_updates() == 1));
}

#[test]
fn step_loss_is_ce_plus_weighted_pseudo_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.lambda_scl = 0.7;
    let pool = samples(4, 16, 3, 10);
    let mut net = init_network(&cfg).unwrap();
    let mut opt = OptimizerState::new(&net, &cfg.train.optim(), 10).unwrap();
    let plan = LossPlan::from_config(&cfg);
    let a = build_batch(&pool, &[0, 1], false, &cfg, [0.5; 3], &[1]).unwrap();
    let b = build_batch(&pool, &[2, 3], true, &cfg, [0.5; 3], &[2]).unwrap();
    let l = train_step(&mut net, &mut opt, Some(&a), Some(&b), &plan).unwrap();
    assert!((l.total - (l.ce + 0.7 * l.scl)).abs() < 1e-12);
    assert!(l.ce > 0.0 && l.scl > 0.0);
    assert!(matches!(train_step(&mut net, &mut opt, None, None, &plan), Err(Error::Config(_))));
}

#[test]
fn curve_has_one_row_per_logging_interval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.log_every = 3;
    cfg.train.teacher_iters = 7;
    let (_, curve) = train_teacher(&cfg, &samples(3, 16, 3, 20), [0.5; 3]).unwrap();
    assert_eq!(curve.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 6, 7]);
    assert!(curve.windows(2).all(|w| w[1].lr < w[0].lr));
}

#[test]
fn teacher_training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let pool = samples(3, 16, 3, 30);
    let (a, ca) = train_teacher(&cfg, &pool, [0.5; 3]).unwrap();
    let (b, cb) = train_teacher(&cfg, &pool, [0.5; 3]).unwrap();
    assert_eq!(checkpoint::encode(&a, None), checkpoint::encode(&b, None));
    assert_eq!(ca, cb);
    let mut other = cfg.clone();
    other.train.seed = 1;
    let (c, _) = train_teacher(&other, &pool, [0.5; 3]).unwrap();
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn empty_labeled_set_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(matches!(train_teacher(&cfg, &[], [0.5; 3]), Err(Error::Config(_))));
}

#[test]
fn zero_lambda_student_matches_labeled_only_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.lambda_scl = 0.0;
    let labeled = samples(3, 16, 3, 40);
    let pseudo = samples(3, 16, 3, 50);
    let (teacher, _) = train_teacher(&cfg, &labeled, [0.5; 3]).unwrap();
    let opts = StudentOptions { bn_mode: BnMode::Dsbn, pseudo_strong: true, stream: 9 };
    let (with, _) = train_student(&cfg, &teacher, &labeled, &pseudo, [0.5; 3], opts).unwrap();
    let (without, _) = train_student(&cfg, &teacher, &labeled, &[], [0.5; 3], opts).unwrap();
    assert_eq!(with.params(), without.params());
    assert_eq!(bank_sums(&with).0, bank_sums(&without).0);

    // With no pseudo data, a student is just more teacher-style training.
    let mut cont = teacher.clone();
    let mut opt = OptimizerState::new(&cont, &cfg.train.optim(), cfg.train.student_iters).unwrap();
    let sched = Schedule {
        labeled: &labeled,
        pseudo: &[],
        iters: cfg.train.student_iters,
        batch_labeled: cfg.train.batch_labeled,
        batch_pseudo: 0,
        labeled_strong: false,
        pseudo_strong: false,
        stream: 9,
    };
    run_schedule(&mut cont, &mut opt, &sched, &cfg, [0.5; 3], &LossPlan::from_config(&cfg)).unwrap();
    let weak_only = StudentOptions { pseudo_strong: false, ..opts };
    let (student, _) = train_student(&cfg, &teacher, &labeled, &[], [0.5; 3], weak_only).unwrap();
    assert_eq!(checkpoint::encode(&student, None), checkpoint::encode(&cont, None));

    let divergence = |n: &sslseg::model::MicroSegNet| {
        let r = stats_report(n.layer_names().into_iter().zip(n.norms.iter()));
        r.layers.iter().map(|l| l.total()).collect::<Vec<_>>()
    };
    assert!(divergence(&student).iter().all(|&d| d == 0.0));
    assert!(divergence(&with).iter().all(|&d| d > 0.0));
}

#[test]
fn teacher_memorizes_one_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.model.width = 8;
    cfg.augment.scale_min = 1.0;
    cfg.augment.scale_max = 1.0;
    cfg.augment.flip_prob = 0.0;
    cfg.augment.crop_size = 8;
    cfg.train.teacher_iters = 200;
    cfg.train.batch_labeled = 1;
    cfg.train.base_lr = 0.05;
    cfg.train.log_every = 1;
    let labels: Vec<u8> = (0..64).map(|i| if i % 8 < 3 { 0 } else if i / 8 < 4 { 1 } else { 2 }).collect();
    let sample = LoadedSample {
        id: "one".into(),
        image: common::random_image(8, 8, 3),
        labels: Some(LabelMap::new(8, 8, labels).unwrap()),
    };
    let (_, curve) = train_teacher(&cfg, &[sample], [0.5; 3]).unwrap();
    assert_eq!(curve.len(), 200);
    assert!(curve[199].ce < 0.05, "final CE {}", curve[199].ce);
}

#[test]
fn pipeline_and_ablations_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    generate_dataset(&cfg.data.synthetic_spec(), cfg.data.n_train, cfg.data.n_val, &cfg.data.dir).unwrap();
    let run = dir.path().join("runs/tiny");
    let out = run_pipeline(&cfg, &run).unwrap();
    assert!(!out.rounds.is_empty() && out.rounds.len() <= cfg.train.rounds);
    assert!((1..=out.rounds.len()).contains(&out.best_round));
    for rel in ["teacher.ckpt", "teacher_curve.csv", "rounds.csv", "best.ckpt", "round1/student.ckpt", "round1/pseudo/manifest.tsv"] {
        assert!(run.join(rel).exists(), "{rel}");
    }
    let rounds_csv = std::fs::read_to_string(run.join("rounds.csv")).unwrap();
    assert_eq!(rounds_csv.lines().next(), Some("round,miou,iou_0,iou_1,iou_2"));
    assert_eq!(rounds_csv.lines().count(), out.rounds.len() + 1);
    let (best, _) = checkpoint::load(&run.join("best.ckpt")).unwrap();
    assert_eq!(best, out.best);

    let data = prepare_data(&cfg).unwrap();
    assert_eq!(data.labeled.len(), 4);
    assert_eq!(data.unlabeled.len(), 12);
    let pseudo = pseudo_label_round(&cfg, &out.teacher, &data, &dir.path().join("p")).unwrap();
    assert_eq!(pseudo.len(), 12);
    let mut rows = ablate_bn(&cfg, &out.teacher, &data, &pseudo).unwrap();
    assert_eq!(rows.len(), 6);
    rows.extend(ablate_data(&cfg, &out.teacher, &data, &pseudo).unwrap());
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.miou)));
    let p = dir.path().join("ablation.csv");
    write_ablation_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 3));
}

#[test]
fn config_overrides_and_validation() {
    let cfg = ExperimentConfig::load(None, &["train.seed=5".into(), "tta.scales=[1.0]".into()]).unwrap();
    assert_eq!(cfg.train.seed, 5);
    assert_eq!(cfg.tta.scales, vec![1.0]);
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

    for bad in ["train.bogus=1", "nodot=1", "train.seed", "data.labeled_fraction=0.0", "train.rounds=0"] {
        assert!(matches!(ExperimentConfig::load(None, &[bad.into()]), Err(Error::Config(_))), "{bad}");
    }
    assert!(ExperimentConfig::from_toml("[augment.ranges]\nbogus = 1\n").is_err());
    let mut t = toml::Table::new();
    apply_override(&mut t, "train.name=\"x y\"").unwrap();
    assert_eq!(t["train"]["name"].as_str(), Some("x y"));
}
