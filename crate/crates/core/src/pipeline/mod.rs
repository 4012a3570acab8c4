//! Teacher training, pseudo labeling, student rounds, evaluation and ablations.

mod config;
mod metrics;
mod train;

pub use config::{apply_override, known_keys, DataConfig, ExperimentConfig, PseudoLoss, TrainConfig};
pub use metrics::{evaluate, predict_labels, ConfusionMatrix, EvalReport};
pub use train::{
    build_batch, init_network, run_schedule, student_stream, train_step, train_student, train_teacher, write_curve,
    Batch, CurveRow, LossPlan, Schedule, StepLoss, StudentOptions, TEACHER_STREAM,
};

use std::path::Path;

use crate::datahub::{load_samples, read_mean, split, LoadedSample, Manifest, Sample};
use crate::error::{Error, Result};
use crate::model::{checkpoint, MicroSegNet};
use crate::normalization::BnMode;
use crate::pseudolabel::generate_semi_dataset;

/// Everything a run reads from the dataset directory.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub mean: [f64; 3],
    pub labeled: Vec<LoadedSample>,
    /// Label paths withheld.
    pub unlabeled: Vec<Sample>,
    pub val: Vec<LoadedSample>,
    pub manifest: Manifest,
}

/// Reads `cfg.data.dir`, splits by `data.labeled_fraction` under `train.seed`,
/// and loads the labeled and validation pixels.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let dir = &cfg.data.dir;
    let manifest = Manifest::read(&dir.join("manifest.tsv"), true)?;
    let mean = read_mean(&dir.join("mean.txt"))?;
    let (labeled, mut unlabeled) = split(&manifest, cfg.data.labeled_fraction, cfg.train.seed)?;
    if cfg.data.unlabeled_ratio > 0.0 {
        let keep = (cfg.data.unlabeled_ratio * labeled.len() as f64).round() as usize;
        unlabeled.truncate(keep);
    }
    let val: Vec<Sample> = manifest.val().cloned().collect();
    Ok(DataBundle {
        mean,
        labeled: load_samples(&labeled, cfg.data.classes)?,
        unlabeled,
        val: load_samples(&val, cfg.data.classes)?,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundResult {
    pub round: usize,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct IterateOutcome {
    pub rounds: Vec<RoundResult>,
    /// 1-based round of the best student.
    pub best_round: usize,
    pub best: MicroSegNet,
}

fn iou_fields(per_class: &[Option<f64>]) -> String {
    per_class
        .iter()
        .map(|v| v.map_or("nan".to_string(), |x| x.to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_rounds_csv(path: &Path, classes: usize, rounds: &[RoundResult]) -> Result<()> {
    let mut text = String::from("round,miou");
    for c in 0..classes {
        text.push_str(&format!(",iou_{c}"));
    }
    text.push('\n');
    for r in rounds {
        text.push_str(&format!("{},{},{}\n", r.round, r.miou, iou_fields(&r.per_class)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Pseudo-labels the unlabeled pool with `teacher` into `out_dir` and loads the result.
pub fn pseudo_label_round(
    cfg: &ExperimentConfig,
    teacher: &MicroSegNet,
    data: &DataBundle,
    out_dir: &Path,
) -> Result<Vec<LoadedSample>> {
    let semi = generate_semi_dataset(teacher, &data.unlabeled, &cfg.tta, data.mean, out_dir)?;
    if let Some((id, msg)) = semi.failures.first() {
        return Err(Error::Config(format!(
            "{} unlabeled images could not be pseudo-labeled; first: `{id}`: {msg}",
            semi.failures.len()
        )));
    }
    load_samples(&semi.manifest.samples, cfg.data.classes)
}

/// Self-training rounds starting from `teacher`. Each round relabels the
/// unlabeled pool with the best model so far, trains a student initialized
/// from it and evaluates on the validation set. Stops after `train.rounds`
/// rounds or after two consecutive drops in validation mIoU.
///
/// Writes `round<r>/{pseudo/, student.ckpt, student_curve.csv}`,
/// `rounds.csv` and `best.ckpt` under `run_dir`.
pub fn iterate(cfg: &ExperimentConfig, teacher: &MicroSegNet, data: &DataBundle, run_dir: &Path) -> Result<IterateOutcome> {
    let mut current = teacher.clone();
    let mut best: Option<(usize, f64, MicroSegNet)> = None;
    let mut rounds: Vec<RoundResult> = Vec::new();
    let mut drops = 0;
    for round in 1..=cfg.train.rounds {
        let dir = run_dir.join(format!("round{round}"));
        create_dir(&dir)?;
        let pseudo = pseudo_label_round(cfg, &current, data, &dir.join("pseudo"))?;
        let (student, curve) = train_student(
            cfg,
            &current,
            &data.labeled,
            &pseudo,
            data.mean,
            StudentOptions::from_config(cfg, round),
        )?;
        write_curve(&dir.join("student_curve.csv"), &curve)?;
        checkpoint::save(&dir.join("student.ckpt"), &student, None)?;
        let report = evaluate(&student, &data.val, data.mean, cfg.train.eval_batch)?;
        if let Some(prev) = rounds.last() {
            drops = if report.miou < prev.miou { drops + 1 } else { 0 };
        }
        rounds.push(RoundResult {
            round,
            miou: report.miou,
            per_class: report.per_class,
        });
        write_rounds_csv(&run_dir.join("rounds.csv"), cfg.data.classes, &rounds)?;
        if best.as_ref().is_none_or(|(_, m, _)| report.miou > *m) {
            best = Some((round, report.miou, student));
        }
        current = best.as_ref().expect("set above").2.clone();
        if drops >= 2 {
            break;
        }
    }
    let (best_round, _, best) = best.expect("rounds ≥ 1");
    checkpoint::save(&run_dir.join("best.ckpt"), &best, None)?;
    Ok(IterateOutcome {
        rounds,
        best_round,
        best,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub baseline: EvalReport,
    pub rounds: Vec<RoundResult>,
    pub best_round: usize,
    pub teacher: MicroSegNet,
    pub best: MicroSegNet,
}

impl PipelineOutcome {
    /// Validation mIoU of the last completed round.
    pub fn final_miou(&self) -> f64 {
        self.rounds.last().map_or(self.baseline.miou, |r| r.miou)
    }
}

/// Teacher on the labeled split, its validation score as the supervised
/// baseline, then [`iterate`]. Writes `teacher.ckpt` and `teacher_curve.csv`.
pub fn run_pipeline(cfg: &ExperimentConfig, run_dir: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    create_dir(run_dir)?;
    let data = prepare_data(cfg)?;
    let (teacher, curve) = train_teacher(cfg, &data.labeled, data.mean)?;
    write_curve(&run_dir.join("teacher_curve.csv"), &curve)?;
    checkpoint::save(&run_dir.join("teacher.ckpt"), &teacher, None)?;
    let baseline = evaluate(&teacher, &data.val, data.mean, cfg.train.eval_batch)?;
    let it = iterate(cfg, &teacher, &data, run_dir)?;
    Ok(PipelineOutcome {
        baseline,
        rounds: it.rounds,
        best_round: it.best_round,
        teacher,
        best: it.best,
    })
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub grid: &'static str,
    pub setting: String,
    pub miou: f64,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = String::from("grid,setting,miou\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.grid, r.setting, r.miou));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Students from `teacher` on `pseudo` under every normalization mode, with
/// weakly and strongly augmented pseudo batches. All cells share the
/// round-1 random stream so they see the same sub-batches.
pub fn ablate_bn(
    cfg: &ExperimentConfig,
    teacher: &MicroSegNet,
    data: &DataBundle,
    pseudo: &[LoadedSample],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mode in [BnMode::Trainable, BnMode::Fixed, BnMode::Dsbn] {
        for strong in [false, true] {
            let opts = StudentOptions {
                bn_mode: mode,
                pseudo_strong: strong,
                stream: student_stream(1),
            };
            let (student, _) = train_student(cfg, teacher, &data.labeled, pseudo, data.mean, opts)?;
            let report = evaluate(&student, &data.val, data.mean, cfg.train.eval_batch)?;
            rows.push(AblationRow {
                grid: "bn",
                setting: format!("{mode}+{}", if strong { "strong" } else { "weak" }),
                miou: report.miou,
            });
        }
    }
    Ok(rows)
}

/// Single data-group training: the labeled split, every training image with
/// ground truth, or the pseudo-labeled pool (from `teacher`). Each group is
/// trained weak-only, with a strongly augmented second sub-batch under a
/// single bank, and with that sub-batch on the strong bank. Cross-entropy
/// throughout.
pub fn ablate_data(
    cfg: &ExperimentConfig,
    teacher: &MicroSegNet,
    data: &DataBundle,
    pseudo: &[LoadedSample],
) -> Result<Vec<AblationRow>> {
    let full: Vec<Sample> = data.manifest.train().cloned().collect();
    let full = load_samples(&full, cfg.data.classes)?;
    let mut plain = cfg.clone();
    plain.train.pseudo_loss = PseudoLoss::Ce;
    plain.train.lambda_scl = 1.0;
    let plan = LossPlan::from_config(&plain);
    let groups: [(&str, &[LoadedSample], bool); 3] = [
        ("labeled-gt", &data.labeled, false),
        ("full-gt", &full, false),
        ("pseudo", pseudo, true),
    ];
    let mut rows = Vec::new();
    for (gi, (group, samples, from_teacher)) in groups.into_iter().enumerate() {
        for (vi, (variant, strong, mode)) in [
            ("weak", false, BnMode::Trainable),
            ("saug", true, BnMode::Trainable),
            ("saug+dsbn", true, BnMode::Dsbn),
        ]
        .into_iter()
        .enumerate()
        {
            let (mut net, iters) = if from_teacher {
                (teacher.clone(), cfg.train.student_iters)
            } else {
                (init_network(cfg)?, cfg.train.teacher_iters)
            };
            net.bn_mode = mode;
            if mode == BnMode::Dsbn {
                net.init_pbn();
            }
            let mut opt = crate::model::OptimizerState::new(&net, &cfg.train.optim(), iters)?;
            let half = cfg.train.batch_labeled.div_ceil(2);
            let sched = Schedule {
                labeled: samples,
                pseudo: samples,
                iters,
                batch_labeled: half,
                batch_pseudo: cfg.train.batch_labeled - half,
                labeled_strong: false,
                pseudo_strong: strong,
                stream: 1000 + 10 * gi as u64 + vi as u64,
            };
            run_schedule(&mut net, &mut opt, &sched, &plain, data.mean, &plan)?;
            let report = evaluate(&net, &data.val, data.mean, cfg.train.eval_batch)?;
            rows.push(AblationRow {
                grid: "data",
                setting: format!("{group}+{variant}"),
                miou: report.miou,
            });
        }
    }
    Ok(rows)
}
