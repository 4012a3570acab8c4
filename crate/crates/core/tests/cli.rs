mod common;

use std::path::Path;
use std::process::{Command, Output};

use sslseg::pipeline::{known_keys, ExperimentConfig};

use common::tiny_config;

const BIN: &str = env!("CARGO_BIN_EXE_sslseg");

fn sslseg(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SSLSEG_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sslseg(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Writes the tiny config to `root/tiny.toml` and returns its path.
fn write_config(root: &Path, cfg: &ExperimentConfig) -> String {
    let p = root.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn subcommand_chain_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config(dir.path()));
    let c = cfg_path.as_str();
    let run = dir.path().join("runs/chain");
    let at = |rel: &str| run.join(rel).to_str().unwrap().to_string();

    ok(&["--config", c, "--name", "chain", "gen-data"]);
    assert!(dir.path().join("data/manifest.tsv").exists());
    ok(&["--config", c, "--name", "chain", "train-teacher"]);
    let teacher = at("teacher.ckpt");

    let stats = ok(&["--config", c, "--name", "chain", "bn-stats", "--checkpoint", &teacher]);
    assert_eq!(stats.trim().parse::<f64>().unwrap(), 0.0);
    assert!(run.join("bn_stats.csv").exists() && run.join("bn_divergence.csv").exists());

    ok(&["--config", c, "--name", "chain", "pseudo-label"]);
    assert!(run.join("pseudo/manifest.tsv").exists());
    ok(&["--config", c, "--name", "chain", "train-student"]);
    let student = at("student.ckpt");
    let stats = ok(&["--config", c, "--name", "chain", "bn-stats", "--checkpoint", &student]);
    assert!(stats.trim().parse::<f64>().unwrap() > 0.0);

    let miou: f64 = ok(&["--config", c, "--name", "chain", "eval", "--checkpoint", &student]).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let eval = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(eval.starts_with("class,iou\n") && eval.ends_with(&format!("miou,{miou}\n")));

    ok(&["--config", c, "--name", "chain", "iterate", "--checkpoint", &teacher]);
    let summary = std::fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(summary.starts_with("stage,miou\nteacher,"));
    assert!(summary.contains("\nround1,"));

    ok(&["--config", c, "--name", "chain", "aug-preview", "--count", "2"]);
    let policies = std::fs::read_to_string(run.join("aug_preview/policies.csv")).unwrap();
    assert_eq!(policies.lines().count(), 3);
    assert_eq!(std::fs::read_dir(run.join("aug_preview")).unwrap().count(), 2 * 5 + 1);

    ok(&["--config", c, "--name", "chain", "ablate", "--checkpoint", &teacher]);
    let ablation = std::fs::read_to_string(run.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 1 + 6 + 9);
    assert!(!run.join(".lock").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config(dir.path()));
    let c = cfg_path.as_str();
    ok(&["--config", c, "gen-data"]);
    for name in ["a", "b"] {
        ok(&["--config", c, "--name", name, "train-teacher"]);
        ok(&["--config", c, "--name", name, "pseudo-label"]);
    }
    let runs = dir.path().join("runs");
    for rel in ["teacher.ckpt", "teacher_curve.csv", "teacher_eval.csv", "pseudo/manifest.tsv"] {
        assert_eq!(std::fs::read(runs.join("a").join(rel)).unwrap(), std::fs::read(runs.join("b").join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config(dir.path()));
    let c = cfg_path.as_str();
    assert_eq!(code(&sslseg(&["--config", c, "--set", "train.bogus=1", "eval"], &[])), 1);
    assert_eq!(code(&sslseg(&["--config", c, "--set", "no-equals", "eval"], &[])), 1);
    assert_eq!(code(&sslseg(&["--config", c, "--set", "model.width=0", "eval"], &[])), 1);
    assert_eq!(code(&sslseg(&["no-such-command"], &[])), 1);
    assert_eq!(code(&sslseg(&["--config", c, "eval"], &[("SSLSEG_SEED", "x")])), 1);

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[train]\nsede = 3\n").unwrap();
    let out = sslseg(&["--config", typo.to_str().unwrap(), "eval"], &[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    let missing = dir.path().join("nope.ckpt");
    let out = sslseg(&["--config", c, "eval", "--checkpoint", missing.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
    assert_eq!(code(&sslseg(&["--config", "/nonexistent/cfg.toml", "eval"], &[])), 2);

    ok(&["--config", c, "gen-data"]);
    ok(&["--config", c, "train-teacher"]);
    let out = sslseg(&["--config", c, "--name", "fresh", "train-student", "--checkpoint", dir.path().join("runs/run/teacher.ckpt").to_str().unwrap()], &[]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&sslseg(&["--config", c, "eval", "--checkpoint", garbage.to_str().unwrap()], &[])), 2);
    let out = sslseg(&["--config", c, "--set", "data.classes=5", "eval", "--checkpoint", dir.path().join("runs/run/teacher.ckpt").to_str().unwrap()], &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn help_lists_every_key_for_every_subcommand() {
    let keys = known_keys();
    assert!(keys.iter().any(|(k, _)| k == "train.seed"));
    assert!(keys.iter().any(|(k, _)| k == "augment.ranges.brightness"));
    for sub in ["gen-data", "train-teacher", "pseudo-label", "train-student", "iterate", "eval", "bn-stats", "aug-preview", "ablate"] {
        let help = ok(&[sub, "--help"]);
        for (k, _) in &keys {
            assert!(help.contains(k.as_str()), "{sub} --help is missing {k}");
        }
    }
}

#[test]
fn seed_precedence_and_config_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.seed = 11;
    let cfg_path = write_config(dir.path(), &cfg);
    let c = cfg_path.as_str();
    let run = dir.path().join("runs/run");
    let dumped = || ExperimentConfig::from_toml(&std::fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();

    ok(&["--config", c, "gen-data"]);
    assert_eq!(dumped(), cfg);
    let env = [("SSLSEG_SEED", "22")];
    assert!(sslseg(&["--config", c, "gen-data"], &env).status.success());
    assert_eq!(dumped().train.seed, 22);
    assert!(sslseg(&["--config", c, "--seed", "33", "gen-data"], &env).status.success());
    assert_eq!(dumped().train.seed, 33);
    assert!(sslseg(&["--config", c, "--set", "train.seed=44", "gen-data"], &env).status.success());
    assert_eq!(dumped().train.seed, 44);

    let overrides = ["--set", "tta.scales=[0.5, 1.5]", "--set", "augment.ranges.brightness=[-0.1, 0.1]", "--set", "model.bn_mode=\"fixed\""];
    let mut args = vec!["--config", c];
    args.extend(overrides);
    args.push("gen-data");
    ok(&args);
    let d = dumped();
    assert_eq!(d.tta.scales, vec![0.5, 1.5]);
    assert_eq!(d.augment.ranges.brightness, [-0.1, 0.1]);
    let reloaded = ExperimentConfig::load(Some(&run.join("config.toml")), &[]).unwrap();
    assert_eq!(reloaded, d);
}

#[test]
fn a_locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config(dir.path()));
    let run = dir.path().join("runs/run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), b"").unwrap();
    let out = sslseg(&["--config", &cfg_path, "gen-data"], &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(run.join(".lock").exists());
    assert!(!dir.path().join("data").exists());
}

#[test]
fn random_init_eval_has_no_skill() {
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.data.classes = 4;
        cfg.data.image_size = 32;
        cfg.data.n_train = 8;
        cfg.data.n_val = 50;
        cfg.model.width = 8;
        cfg.train.seed = seed;
        let cfg_path = write_config(dir.path(), &cfg);
        ok(&["--config", &cfg_path, "gen-data"]);
        let miou: f64 = ok(&["--config", &cfg_path, "eval"]).trim().parse().unwrap();
        // Chance level for uniform guessing is 1/(2C-1); an untrained network
        // collapses onto a few classes and lands at or below it.
        assert!((0.0..0.25).contains(&miou), "seed {seed}: mIoU {miou}");
    }
}

#[test]
fn default_config_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let default = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = ExperimentConfig::load(Some(&default), &[]).unwrap();
    let d = default.to_str().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("runs");
    let common = ["--config", d, "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let start = std::time::Instant::now();
    for sub in ["gen-data", "train-teacher"] {
        let mut args = common.to_vec();
        args.push(sub);
        ok(&args);
    }
    let mut args = common.to_vec();
    let ckpt = out.join(&cfg.train.name).join("teacher.ckpt");
    args.extend(["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    let miou: f64 = ok(&args).trim().parse().unwrap();
    assert!(start.elapsed().as_secs() < 600);
    assert!(miou > 0.3, "default teacher mIoU {miou}");
}
