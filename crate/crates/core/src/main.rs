use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use sslseg::augment::{apply_strong, apply_weak, sample_policy, FloatImage};
use sslseg::datahub::{generate_dataset, load_samples, write_image, write_labels, Manifest};
use sslseg::model::checkpoint;
use sslseg::model::MicroSegNet;
use sslseg::normalization::stats_report;
use sslseg::pipeline::{
    ablate_bn, ablate_data, evaluate, init_network, iterate, prepare_data, pseudo_label_round, run_pipeline,
    train_student, train_teacher, write_ablation_csv, write_curve, EvalReport, ExperimentConfig, StudentOptions,
};
use sslseg::seeding::rng_for;
use sslseg::{Error, Result};

const SEED_ENV: &str = "SSLSEG_SEED";

#[derive(Parser, Debug)]
#[command(name = "sslseg", version, about = "Semi-supervised semantic segmentation on synthetic scenes")]
struct Cli {
    /// TOML config with [data] [model] [train] [augment] [tta] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.rounds=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run seed; beats SSLSEG_SEED, which beats the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (train.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run name (train.name).
    #[arg(long, global = true)]
    name: Option<String>,
    /// Dataset directory (data.dir).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset into data.dir.
    GenData,
    /// Train the supervised teacher on the labeled split.
    TrainTeacher,
    /// Pseudo-label the unlabeled split with test-time augmentation.
    PseudoLabel {
        /// Labeling model (default: <run>/teacher.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one student on labeled plus pseudo-labeled data.
    TrainStudent {
        /// Initialization (default: <run>/teacher.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pseudo-label manifest (default: <run>/pseudo/manifest.tsv).
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Self-training rounds; trains a teacher first unless --checkpoint is given.
    Iterate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Validation mIoU of a checkpoint (a freshly initialized network without one).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Weak versus strong running statistics of every normalization layer.
    BnStats {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write original, weakly and strongly augmented copies of a few training images.
    AugPreview {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Normalization and data-group ablation grids.
    Ablate {
        /// Teacher (default: trained from scratch).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn key_listing() -> String {
    let mut text = String::from("Config keys (default):\n");
    for (k, v) in sslseg::pipeline::known_keys() {
        text.push_str(&format!("  {k} = {v}\n"));
    }
    text
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed: u64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        overrides.push(format!("train.seed={seed}"));
    }
    overrides.extend(cli.set.iter().cloned());
    if let Some(s) = cli.seed {
        overrides.push(format!("train.seed={s}"));
    }
    let set_str = |key: &str, v: String| format!("{key}={}", toml::Value::String(v));
    if let Some(o) = &cli.out {
        overrides.push(set_str("train.out", o.display().to_string()));
    }
    if let Some(n) = &cli.name {
        overrides.push(set_str("train.name", n.clone()));
    }
    if let Some(d) = &cli.data {
        overrides.push(set_str("data.dir", d.display().to_string()));
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

/// Exclusive ownership of a run directory for the life of the value.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                let msg = if e.kind() == std::io::ErrorKind::AlreadyExists {
                    std::io::Error::new(e.kind(), "run directory is locked by another invocation")
                } else {
                    e
                };
                Error::io(&path, msg)
            })?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_eval(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("class,iou\n");
    for (c, v) in report.per_class.iter().enumerate() {
        text.push_str(&format!("{c},{}\n", v.map_or("nan".into(), |x| x.to_string())));
    }
    text.push_str(&format!("miou,{}\n", report.miou));
    write_text(path, &text)
}

fn load_net(path: &Path) -> Result<MicroSegNet> {
    Ok(checkpoint::load(path)?.0)
}

fn check_classes(net: &MicroSegNet, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    if net.classes != cfg.data.classes {
        return Err(Error::Config(format!(
            "{} predicts {} classes but data.classes is {}",
            path.display(),
            net.classes,
            cfg.data.classes
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let run_dir = cfg.train.out.join(&cfg.train.name);
    let _lock = RunLock::acquire(&run_dir)?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml())?;
    let model_at = |given: &Option<PathBuf>, default: &str| given.clone().unwrap_or_else(|| run_dir.join(default));
    match &cli.command {
        Command::GenData => {
            let manifest = generate_dataset(&cfg.data.synthetic_spec(), cfg.data.n_train, cfg.data.n_val, &cfg.data.dir)?;
            eprintln!("wrote {} samples to {}", manifest.samples.len(), cfg.data.dir.display());
        }
        Command::TrainTeacher => {
            let data = prepare_data(&cfg)?;
            let (teacher, curve) = train_teacher(&cfg, &data.labeled, data.mean)?;
            write_curve(&run_dir.join("teacher_curve.csv"), &curve)?;
            checkpoint::save(&run_dir.join("teacher.ckpt"), &teacher, None)?;
            let report = evaluate(&teacher, &data.val, data.mean, cfg.train.eval_batch)?;
            write_eval(&run_dir.join("teacher_eval.csv"), &report)?;
            eprintln!("teacher val mIoU {:.4}", report.miou);
        }
        Command::PseudoLabel { checkpoint } => {
            let path = model_at(checkpoint, "teacher.ckpt");
            let teacher = load_net(&path)?;
            check_classes(&teacher, &cfg, &path)?;
            let data = prepare_data(&cfg)?;
            let out = run_dir.join("pseudo");
            let semi = sslseg::pseudolabel::generate_semi_dataset(&teacher, &data.unlabeled, &cfg.tta, data.mean, &out)?;
            for (id, msg) in &semi.failures {
                eprintln!("failed to label {id}: {msg}");
            }
            eprintln!("labeled {} images into {}", semi.manifest.samples.len(), out.display());
            if !semi.failures.is_empty() {
                return Err(Error::format(
                    &out,
                    0,
                    format!("{} unlabeled images could not be labeled", semi.failures.len()),
                ));
            }
        }
        Command::TrainStudent { checkpoint, pseudo } => {
            let path = model_at(checkpoint, "teacher.ckpt");
            let init = load_net(&path)?;
            check_classes(&init, &cfg, &path)?;
            let data = prepare_data(&cfg)?;
            let pseudo_path = pseudo.clone().unwrap_or_else(|| run_dir.join("pseudo").join("manifest.tsv"));
            if !pseudo_path.is_file() {
                return Err(Error::Config(format!(
                    "no pseudo-label manifest at {}; run pseudo-label first",
                    pseudo_path.display()
                )));
            }
            let manifest = Manifest::read(&pseudo_path, true)?;
            let pseudo = load_samples(&manifest.samples, cfg.data.classes)?;
            let (student, curve) = train_student(&cfg, &init, &data.labeled, &pseudo, data.mean, StudentOptions::from_config(&cfg, 1))?;
            write_curve(&run_dir.join("student_curve.csv"), &curve)?;
            checkpoint::save(&run_dir.join("student.ckpt"), &student, None)?;
            let report = evaluate(&student, &data.val, data.mean, cfg.train.eval_batch)?;
            write_eval(&run_dir.join("student_eval.csv"), &report)?;
            eprintln!("student val mIoU {:.4}", report.miou);
        }
        Command::Iterate { checkpoint } => {
            let (baseline, rounds) = match checkpoint {
                Some(path) => {
                    let teacher = load_net(path)?;
                    check_classes(&teacher, &cfg, path)?;
                    let data = prepare_data(&cfg)?;
                    let baseline = evaluate(&teacher, &data.val, data.mean, cfg.train.eval_batch)?.miou;
                    (baseline, iterate(&cfg, &teacher, &data, &run_dir)?.rounds)
                }
                None => {
                    let out = run_pipeline(&cfg, &run_dir)?;
                    (out.baseline.miou, out.rounds)
                }
            };
            let mut text = format!("stage,miou\nteacher,{baseline}\n");
            for r in &rounds {
                text.push_str(&format!("round{},{}\n", r.round, r.miou));
                eprintln!("round {} val mIoU {:.4}", r.round, r.miou);
            }
            write_text(&run_dir.join("summary.csv"), &text)?;
            eprintln!("teacher val mIoU {baseline:.4}");
        }
        Command::Eval { checkpoint } => {
            let net = match checkpoint {
                Some(p) => {
                    let net = load_net(p)?;
                    check_classes(&net, &cfg, p)?;
                    net
                }
                None => init_network(&cfg)?,
            };
            let data = prepare_data(&cfg)?;
            let report = evaluate(&net, &data.val, data.mean, cfg.train.eval_batch)?;
            write_eval(&run_dir.join("eval.csv"), &report)?;
            println!("{}", report.miou);
        }
        Command::BnStats { checkpoint } => {
            let net = load_net(checkpoint)?;
            let report = stats_report(net.layer_names().into_iter().zip(net.norms.iter()));
            report.save(&run_dir.join("bn_stats.csv"), &run_dir.join("bn_divergence.csv"))?;
            println!("{}", report.mean_diff + report.log_var_diff);
        }
        Command::AugPreview { count } => {
            let data = prepare_data(&cfg)?;
            let dir = run_dir.join("aug_preview");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut policies = String::from("id,policy\n");
            for (k, s) in data.labeled.iter().take(*count).enumerate() {
                let labels = s.labels.as_ref().expect("labeled split");
                let img = FloatImage::from_image(&s.image);
                let mut rng = rng_for(&[cfg.train.seed, 0xa06, k as u64]);
                let weak = apply_weak(&img, labels, &cfg.augment, data.mean, &mut rng)?;
                let policy = sample_policy(cfg.augment.n_ops, &mut rng)?;
                let strong = apply_strong(&img, labels, &policy, &cfg.augment, data.mean, &mut rng)?;
                write_image(&dir.join(format!("{}_orig.ppm", s.id)), &s.image)?;
                for (tag, aug) in [("weak", weak), ("strong", strong)] {
                    let mut shown = aug.image.clone();
                    shown.subtract_mean(data.mean.map(|m| -m));
                    write_image(&dir.join(format!("{}_{tag}.ppm", s.id)), &shown.to_image())?;
                    write_labels(&dir.join(format!("{}_{tag}.pgm", s.id)), &aug.labels)?;
                }
                let names: Vec<&str> = policy.iter().map(|o| o.as_str()).collect();
                policies.push_str(&format!("{},{}\n", s.id, names.join(" ")));
            }
            write_text(&dir.join("policies.csv"), &policies)?;
        }
        Command::Ablate { checkpoint } => {
            let data = prepare_data(&cfg)?;
            let teacher = match checkpoint {
                Some(p) => {
                    let net = load_net(p)?;
                    check_classes(&net, &cfg, p)?;
                    net
                }
                None => {
                    let (t, curve) = train_teacher(&cfg, &data.labeled, data.mean)?;
                    write_curve(&run_dir.join("teacher_curve.csv"), &curve)?;
                    checkpoint::save(&run_dir.join("teacher.ckpt"), &t, None)?;
                    t
                }
            };
            let pseudo = pseudo_label_round(&cfg, &teacher, &data, &run_dir.join("pseudo"))?;
            let mut rows = ablate_bn(&cfg, &teacher, &data, &pseudo)?;
            rows.extend(ablate_data(&cfg, &teacher, &data, &pseudo)?);
            write_ablation_csv(&run_dir.join("ablation.csv"), &rows)?;
            for r in &rows {
                eprintln!("{} {} {:.4}", r.grid, r.setting, r.miou);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let keys = key_listing();
    let cmd = Cli::command().mut_subcommands(|s| s.after_help(keys.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
