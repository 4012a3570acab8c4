//! Tab-separated sample manifests.
//!
//! One record per line: `id<TAB>image_path<TAB>label_path_or_-<TAB>provenance<TAB>split`.
//! Lines starting with `#` are comments. Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    GroundTruth,
    Pseudo,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    TrainLabeled,
    TrainUnlabeled,
    Val,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::GroundTruth => "ground-truth",
            Provenance::Pseudo => "pseudo",
            Provenance::None => "none",
        })
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ground-truth" => Ok(Provenance::GroundTruth),
            "pseudo" => Ok(Provenance::Pseudo),
            "none" => Ok(Provenance::None),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainLabeled => "train-labeled",
            Split::TrainUnlabeled => "train-unlabeled",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train-labeled" => Ok(Split::TrainLabeled),
            "train-unlabeled" => Ok(Split::TrainUnlabeled),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub provenance: Provenance,
    pub split: Split,
}

impl Sample {
    pub fn is_train(&self) -> bool {
        self.split != Split::Val
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn new(samples: Vec<Sample>) -> Self {
        Manifest { samples }
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.is_train())
    }

    pub fn val(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Val)
    }

    /// Serializes with paths made relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| -> String {
            p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
        };
        let mut out = String::from("# id\timage\tlabel\tprovenance\tsplit\n");
        for s in &self.samples {
            let label = s.label.as_deref().map(rel).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.id,
                rel(&s.image),
                label,
                s.provenance,
                s.split
            ));
        }
        out
    }

    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, path: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::format(
                    path,
                    start,
                    format!("expected 5 tab-separated fields, found {}", fields.len()),
                ));
            }
            let bad = |msg: String| Error::format(path, start, msg);
            let id = fields[0].to_string();
            if id.is_empty() {
                return Err(bad("empty sample id".into()));
            }
            if !seen.insert(id.clone()) {
                return Err(bad(format!("duplicate sample id `{id}`")));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() { p } else { base.join(p) }
            };
            let label = (fields[2] != "-").then(|| resolve(fields[2]));
            let provenance: Provenance = fields[3].parse().map_err(bad)?;
            let split: Split = fields[4].parse().map_err(bad)?;
            if label.is_some() != (provenance != Provenance::None) {
                return Err(bad(format!(
                    "sample `{id}`: a label path must be present exactly when provenance is not `none`"
                )));
            }
            samples.push(Sample {
                id,
                image: resolve(fields[1]),
                label,
                provenance,
                split,
            });
        }
        Ok(Manifest { samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        std::fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; in strict mode every referenced file must exist.
    pub fn read(path: &Path, strict: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let manifest = Self::parse(&text, base, path)?;
        if strict {
            for s in &manifest.samples {
                for p in std::iter::once(&s.image).chain(s.label.as_ref()) {
                    if !p.exists() {
                        return Err(Error::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                        ));
                    }
                }
            }
        }
        Ok(manifest)
    }
}

/// Writes per-channel means, one decimal per line.
pub fn write_mean(path: &Path, mean: [f64; 3]) -> Result<()> {
    let text = format!("{}\n{}\n{}\n", mean[0], mean[1], mean[2]);
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_mean(path: &Path) -> Result<[f64; 3]> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = [0.0; 3];
    let mut lines = text.lines();
    let mut offset = 0;
    for v in out.iter_mut() {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, offset, "expected 3 lines"))?;
        *v = line
            .trim()
            .parse()
            .map_err(|_| Error::format(path, offset, format!("not a number: `{line}`")))?;
        offset += line.len() + 1;
    }
    Ok(out)
}
