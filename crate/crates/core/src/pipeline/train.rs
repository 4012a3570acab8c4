use std::path::Path;

use rand::Rng;

use super::config::{ExperimentConfig, PseudoLoss};
use crate::augment::{apply_strong, apply_weak, sample_policy, stack_planar, FloatImage};
use crate::datahub::LoadedSample;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, scl, SclConfig, IGNORE_INDEX};
use crate::model::{collect_grads, poly_lr, sgd_step, MicroSegNet, Mode, OptimizerState};
use crate::normalization::{BnMode, BranchTag};
use crate::numerics::{Tape, Tensor};
use crate::seeding::{derive_seed, rng_for};

/// One augmented sub-batch and the branch it is routed through.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub tag: BranchTag,
}

/// Augments `samples[indices]` into a batch. Slot `k` draws its augmentation
/// from `seed_parts ++ [k]`, so the result does not depend on who builds it.
pub fn build_batch(
    samples: &[LoadedSample],
    indices: &[usize],
    strong: bool,
    cfg: &ExperimentConfig,
    mean: [f64; 3],
    seed_parts: &[u64],
) -> Result<Batch> {
    let mut images = Vec::with_capacity(indices.len());
    let mut labels = Vec::new();
    for (slot, &i) in indices.iter().enumerate() {
        let s = &samples[i];
        let gt = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("training sample `{}` has no label map", s.id)))?;
        let mut parts = seed_parts.to_vec();
        parts.push(slot as u64);
        let mut rng = rng_for(&parts);
        let img = FloatImage::from_image(&s.image);
        let out = if strong {
            let policy = sample_policy(cfg.augment.n_ops, &mut rng)?;
            apply_strong(&img, gt, &policy, &cfg.augment, mean, &mut rng)?
        } else {
            apply_weak(&img, gt, &cfg.augment, mean, &mut rng)?
        };
        labels.extend_from_slice(&out.labels.data);
        images.push(out.image);
    }
    let refs: Vec<&FloatImage> = images.iter().collect();
    Ok(Batch {
        images: stack_planar(&refs)?,
        labels,
        tag: if strong { BranchTag::Strong } else { BranchTag::Weak },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub lambda: f64,
    pub pseudo_loss: PseudoLoss,
    pub scl: SclConfig,
}

impl LossPlan {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        LossPlan {
            lambda: cfg.train.lambda_scl,
            pseudo_loss: cfg.train.pseudo_loss,
            scl: cfg.train.scl(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    /// Unweighted pseudo-label loss.
    pub scl: f64,
    /// `ce + λ·scl` as differentiated.
    pub total: f64,
}

/// One optimizer step on a labeled sub-batch (cross-entropy) and a
/// pseudo-labeled sub-batch (self-correction loss), each forwarded through its
/// own branch tag, with a single backward pass and a single SGD update.
pub fn train_step(
    net: &mut MicroSegNet,
    opt: &mut OptimizerState,
    labeled: Option<&Batch>,
    pseudo: Option<&Batch>,
    plan: &LossPlan,
) -> Result<StepLoss> {
    if labeled.is_none() && pseudo.is_none() {
        return Err(Error::Config("a training step needs at least one sub-batch".into()));
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let mut parts = Vec::new();
    let mut out = StepLoss::default();
    if let Some(b) = labeled {
        let x = tape.constant(b.images.clone());
        let logits = net.forward(&mut tape, &bound, x, b.tag, Mode::Train)?;
        let (l, o) = cross_entropy(&mut tape, logits, &b.labels, IGNORE_INDEX)?;
        out.ce = o.loss;
        parts.push(l);
    }
    if let Some(b) = pseudo {
        let x = tape.constant(b.images.clone());
        let logits = net.forward(&mut tape, &bound, x, b.tag, Mode::Train)?;
        let (l, o) = match plan.pseudo_loss {
            PseudoLoss::Scl => scl(&mut tape, logits, &b.labels, IGNORE_INDEX, &plan.scl)?,
            PseudoLoss::Ce => cross_entropy(&mut tape, logits, &b.labels, IGNORE_INDEX)?,
        };
        out.scl = o.loss;
        parts.push(tape.scale(l, plan.lambda)?);
    }
    let total = match parts[..] {
        [a, b] => tape.add(a, b)?,
        [a] => a,
        _ => unreachable!(),
    };
    out.total = tape.value(total).item();
    tape.backward(total)?;
    let grads = collect_grads(&tape, &bound);
    sgd_step(net, &grads, opt)?;
    Ok(out)
}

/// One row of a training-curve CSV: interval means ending at `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub scl: f64,
    pub total: f64,
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut text = String::from("step,lr,ce,scl,total\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.step, r.lr, r.ce, r.scl, r.total));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// What a training loop draws from at each step.
#[derive(Clone, Copy, Debug)]
pub struct Schedule<'a> {
    pub labeled: &'a [LoadedSample],
    pub pseudo: &'a [LoadedSample],
    pub iters: usize,
    pub batch_labeled: usize,
    pub batch_pseudo: usize,
    pub labeled_strong: bool,
    pub pseudo_strong: bool,
    /// Separates the random streams of different training stages.
    pub stream: u64,
}

/// Runs `sched.iters` steps. Sub-batch indices and augmentations are drawn
/// from `(seed, stream, step, sub-batch, slot)`.
pub fn run_schedule(
    net: &mut MicroSegNet,
    opt: &mut OptimizerState,
    sched: &Schedule<'_>,
    cfg: &ExperimentConfig,
    mean: [f64; 3],
    plan: &LossPlan,
) -> Result<Vec<CurveRow>> {
    let seed = cfg.train.seed;
    let log_every = cfg.train.log_every;
    let mut rows = Vec::new();
    let mut acc = (0.0, 0.0, 0.0, 0.0, 0usize);
    for step in 0..sched.iters {
        let lr = poly_lr(opt);
        let draw = |which: u64, pool: &[LoadedSample], size: usize, strong: bool| -> Result<Option<Batch>> {
            if pool.is_empty() || size == 0 {
                return Ok(None);
            }
            let mut rng = rng_for(&[seed, sched.stream, step as u64, which]);
            let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..pool.len())).collect();
            build_batch(pool, &idx, strong, cfg, mean, &[seed, sched.stream, step as u64, which, 1]).map(Some)
        };
        let labeled = draw(0, sched.labeled, sched.batch_labeled, sched.labeled_strong)?;
        let pseudo = draw(1, sched.pseudo, sched.batch_pseudo, sched.pseudo_strong)?;
        let loss = train_step(net, opt, labeled.as_ref(), pseudo.as_ref(), plan)?;
        acc = (acc.0 + lr, acc.1 + loss.ce, acc.2 + loss.scl, acc.3 + loss.total, acc.4 + 1);
        if (step + 1) % log_every == 0 || step + 1 == sched.iters {
            let k = acc.4 as f64;
            rows.push(CurveRow {
                step: step + 1,
                lr: acc.0 / k,
                ce: acc.1 / k,
                scl: acc.2 / k,
                total: acc.3 / k,
            });
            acc = (0.0, 0.0, 0.0, 0.0, 0);
        }
    }
    Ok(rows)
}

pub const TEACHER_STREAM: u64 = 1;

pub fn student_stream(round: usize) -> u64 {
    100 + round as u64
}

/// A freshly initialized network, seeded from the run seed.
pub fn init_network(cfg: &ExperimentConfig) -> Result<MicroSegNet> {
    let mut net = MicroSegNet::new(&cfg.model, cfg.data.classes, derive_seed(&[cfg.train.seed, 7]))?;
    net.bn_mode = BnMode::Dsbn;
    Ok(net)
}

/// Supervised training on the labeled set only: weak augmentation, weak
/// branch, cross-entropy.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    labeled: &[LoadedSample],
    mean: [f64; 3],
) -> Result<(MicroSegNet, Vec<CurveRow>)> {
    if labeled.is_empty() {
        return Err(Error::Config("the labeled set is empty".into()));
    }
    let mut net = init_network(cfg)?;
    let mut opt = OptimizerState::new(&net, &cfg.train.optim(), cfg.train.teacher_iters)?;
    let sched = Schedule {
        labeled,
        pseudo: &[],
        iters: cfg.train.teacher_iters,
        batch_labeled: cfg.train.batch_labeled,
        batch_pseudo: 0,
        labeled_strong: false,
        pseudo_strong: false,
        stream: TEACHER_STREAM,
    };
    let curve = run_schedule(&mut net, &mut opt, &sched, cfg, mean, &LossPlan::from_config(cfg))?;
    Ok((net, curve))
}

/// Options that vary between students of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentOptions {
    pub bn_mode: BnMode,
    pub pseudo_strong: bool,
    pub stream: u64,
}

impl StudentOptions {
    pub fn from_config(cfg: &ExperimentConfig, round: usize) -> Self {
        StudentOptions {
            bn_mode: cfg.model.bn_mode,
            pseudo_strong: cfg.train.pseudo_strong,
            stream: student_stream(round),
        }
    }
}

/// Continues from `init` on labeled plus pseudo-labeled data. Under
/// [`BnMode::Dsbn`] with strong pseudo batches the strong banks are reseeded
/// from the weak ones first.
pub fn train_student(
    cfg: &ExperimentConfig,
    init: &MicroSegNet,
    labeled: &[LoadedSample],
    pseudo: &[LoadedSample],
    mean: [f64; 3],
    opts: StudentOptions,
) -> Result<(MicroSegNet, Vec<CurveRow>)> {
    let mut net = init.clone();
    net.bn_mode = opts.bn_mode;
    if opts.bn_mode == BnMode::Dsbn && opts.pseudo_strong {
        net.init_pbn();
    }
    let mut opt = OptimizerState::new(&net, &cfg.train.optim(), cfg.train.student_iters)?;
    let sched = Schedule {
        labeled,
        pseudo,
        iters: cfg.train.student_iters,
        batch_labeled: cfg.train.batch_labeled,
        batch_pseudo: cfg.train.batch_pseudo,
        labeled_strong: false,
        pseudo_strong: opts.pseudo_strong,
        stream: opts.stream,
    };
    let curve = run_schedule(&mut net, &mut opt, &sched, cfg, mean, &LossPlan::from_config(cfg))?;
    Ok((net, curve))
}
