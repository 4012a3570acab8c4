//! Experiment configuration: a TOML file with `[data] [model] [train]
//! [augment] [tta]` tables, dotted-key overrides, and a resolved dump.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::datahub::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{SclConfig, SclWeight};
use crate::model::{ModelConfig, OptimConfig};
use crate::pseudolabel::TtaConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.tsv` and `mean.txt`.
    pub dir: PathBuf,
    pub image_size: usize,
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise: f64,
    pub color_jitter: f64,
    /// Seed of the scene generator; independent of `train.seed`.
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub labeled_fraction: f64,
    /// Unlabeled images used per labeled image; 0 uses the whole unlabeled pool.
    pub unlabeled_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataConfig {
            dir: PathBuf::from("data"),
            image_size: s.image_size,
            classes: s.classes,
            shapes_min: s.shapes_min,
            shapes_max: s.shapes_max,
            noise: s.noise,
            color_jitter: s.color_jitter,
            seed: s.seed,
            n_train: 256,
            n_val: 64,
            labeled_fraction: 0.125,
            unlabeled_ratio: 0.0,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            classes: self.classes,
            shapes_min: self.shapes_min,
            shapes_max: self.shapes_max,
            noise: self.noise,
            color_jitter: self.color_jitter,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoLoss {
    Scl,
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Run directory name under the output root.
    pub name: String,
    pub out: PathBuf,
    pub batch_labeled: usize,
    pub batch_pseudo: usize,
    pub teacher_iters: usize,
    pub student_iters: usize,
    pub rounds: usize,
    pub lambda_scl: f64,
    pub scl_log_clamp: f64,
    pub pseudo_loss: PseudoLoss,
    /// Strong augmentation (and the strong branch tag) on pseudo-labeled batches.
    pub pseudo_strong: bool,
    pub log_every: usize,
    pub eval_batch: usize,
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        TrainConfig {
            seed: 0,
            name: "run".into(),
            out: PathBuf::from("runs"),
            batch_labeled: 8,
            batch_pseudo: 8,
            teacher_iters: 600,
            student_iters: 600,
            rounds: 2,
            lambda_scl: 1.0,
            scl_log_clamp: -4.0,
            pseudo_loss: PseudoLoss::Scl,
            pseudo_strong: true,
            log_every: 50,
            eval_batch: 16,
            base_lr: o.base_lr,
            power: o.power,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
        }
    }
}

impl TrainConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            base_lr: self.base_lr,
            power: self.power,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn scl(&self) -> SclConfig {
        SclConfig {
            log_clamp: self.scl_log_clamp,
            weight: SclWeight::Detached,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub tta: TtaConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic_spec().validate()?;
        let f = self.data.labeled_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("data.labeled_fraction must lie in (0, 1], got {f}")));
        }
        if !(self.data.unlabeled_ratio >= 0.0 && self.data.unlabeled_ratio.is_finite()) {
            return Err(Error::Config("data.unlabeled_ratio must be ≥ 0".into()));
        }
        self.model.validate()?;
        self.augment.validate()?;
        self.tta.validate()?;
        let t = &self.train;
        if t.batch_labeled == 0 {
            return Err(Error::Config("train.batch_labeled must be ≥ 1".into()));
        }
        if t.rounds == 0 {
            return Err(Error::Config("train.rounds must be ≥ 1".into()));
        }
        if t.log_every == 0 || t.eval_batch == 0 {
            return Err(Error::Config("train.log_every and train.eval_batch must be ≥ 1".into()));
        }
        if !(t.lambda_scl >= 0.0 && t.lambda_scl.is_finite()) {
            return Err(Error::Config(format!("train.lambda_scl must be ≥ 0, got {}", t.lambda_scl)));
        }
        t.scl().validate()?;
        if self.augment.crop_size > self.data.image_size * 2 {
            return Err(Error::Config(format!(
                "augment.crop_size {} is larger than twice data.image_size {}",
                self.augment.crop_size, self.data.image_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` (or defaults when `None`), applies `key=value` overrides, validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets a dotted key such as `train.seed=3`. The value is parsed as a TOML
/// value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Every recognized dotted key with its default value.
pub fn known_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let value = toml::Value::try_from(ExperimentConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    walk("", &value, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = ExperimentConfig::from_toml("[train]\nsed = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("sed")), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "train.seed=7".into(),
                "model.bn_mode=trainable".into(),
                "tta.scales=[1.0]".into(),
                "augment.ranges.multiply=[1.0, 1.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.bn_mode, crate::normalization::BnMode::Trainable);
        assert_eq!(cfg.tta.scales, vec![1.0]);
        assert_eq!(cfg.augment.ranges.multiply, [1.0, 1.0]);
        assert!(ExperimentConfig::load(None, &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn key_listing_covers_nested_tables() {
        let keys: Vec<String> = known_keys().into_iter().map(|(k, _)| k).collect();
        for k in ["data.classes", "train.lambda_scl", "augment.ranges.solarize", "tta.flip"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
