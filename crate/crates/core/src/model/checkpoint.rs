//! Binary checkpoints.
//!
//! ```text
//! SSLSEG1
//! entries <n>
//! <name>\t<dim,dim,...>\t<byte offset into the data block>    (n lines)
//! data
//! <little-endian f64 values>
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::net::{MicroSegNet, ModelConfig};
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::normalization::BnMode;
use crate::numerics::Tensor;

const MAGIC: &str = "SSLSEG1";

fn mode_code(m: BnMode) -> f64 {
    match m {
        BnMode::Dsbn => 0.0,
        BnMode::Trainable => 1.0,
        BnMode::Fixed => 2.0,
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn entries(net: &MicroSegNet, opt: Option<&OptimizerState>) -> Vec<Entry> {
    let mut out = vec![Entry {
        name: "model.meta".into(),
        shape: vec![3],
        values: vec![net.width as f64, net.classes as f64, mode_code(net.bn_mode)],
    }];
    for (name, t) in net.param_names().into_iter().zip(net.params()) {
        out.push(Entry {
            name,
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        });
    }
    for (i, n) in net.norms.iter().enumerate() {
        let c = n.channels();
        for (suffix, v) in [
            ("weak_mean", &n.weak.mean),
            ("weak_var", &n.weak.var),
            ("strong_mean", &n.strong.mean),
            ("strong_var", &n.strong.var),
        ] {
            out.push(Entry {
                name: format!("bn{i}.{suffix}"),
                shape: vec![c],
                values: v.clone(),
            });
        }
        out.push(Entry {
            name: format!("bn{i}.state"),
            shape: vec![5],
            values: vec![
                n.momentum,
                n.eps,
                n.pbn_initialized() as u8 as f64,
                n.weak_updates() as f64,
                n.strong_updates() as f64,
            ],
        });
    }
    if let Some(o) = opt {
        out.push(Entry {
            name: "optimizer.hparams".into(),
            shape: vec![6],
            values: vec![
                o.base_lr,
                o.power,
                o.iter as f64,
                o.iter_max as f64,
                o.momentum,
                o.weight_decay,
            ],
        });
        for (name, v) in net.param_names().into_iter().zip(&o.velocity) {
            out.push(Entry {
                name: format!("optimizer.velocity.{name}"),
                shape: vec![v.len()],
                values: v.clone(),
            });
        }
    }
    out
}

pub fn encode(net: &MicroSegNet, opt: Option<&OptimizerState>) -> Vec<u8> {
    let entries = entries(net, opt);
    let mut header = format!("{MAGIC}\nentries {}\n", entries.len());
    let mut offset = 0;
    for e in &entries {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{}\t{}\t{}\n", e.name, dims.join(","), offset));
        offset += e.values.len() * 8;
    }
    header.push_str("data\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for e in &entries {
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, net: &MicroSegNet, opt: Option<&OptimizerState>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(net, opt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(MicroSegNet, Option<OptimizerState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    let start = *pos;
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| start + i)
        .ok_or_else(|| Error::format(path, start, "unterminated header line"))?;
    *pos = end + 1;
    std::str::from_utf8(&bytes[start..end]).map_err(|_| Error::format(path, start, "header is not UTF-8"))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(MicroSegNet, Option<OptimizerState>)> {
    let mut pos = 0;
    if take_line(bytes, &mut pos, path)? != MAGIC {
        return Err(Error::format(path, 0, format!("missing `{MAGIC}` magic")));
    }
    let at = pos;
    let count: usize = take_line(bytes, &mut pos, path)?
        .strip_prefix("entries ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(path, at, "expected `entries <n>`"))?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let at = pos;
        let line = take_line(bytes, &mut pos, path)?;
        let bad = || Error::format(path, at, format!("malformed entry line `{line}`"));
        let mut fields = line.split('\t');
        let (name, dims, off) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(d), Some(o), None) => (n, d, o),
            _ => return Err(bad()),
        };
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let offset: usize = off.parse().map_err(|_| bad())?;
        table.push((name.to_string(), shape, offset, at));
    }
    let at = pos;
    if take_line(bytes, &mut pos, path)? != "data" {
        return Err(Error::format(path, at, "expected `data` after the entry table"));
    }
    let data = &bytes[pos..];
    let mut values: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let mut expected = 0;
    for (name, shape, offset, at) in table {
        let len: usize = shape.iter().product();
        if offset != expected || offset + len * 8 > data.len() {
            return Err(Error::format(
                path,
                pos + offset.min(data.len()),
                format!("entry `{name}` at offset {offset} with {len} values does not fit the data block"),
            ));
        }
        let v = data[offset..offset + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        expected = offset + len * 8;
        if values.insert(name.clone(), (shape, v)).is_some() {
            return Err(Error::format(path, at, format!("duplicate entry `{name}`")));
        }
    }
    if expected != data.len() {
        return Err(Error::format(path, pos + expected, "trailing bytes after the last entry"));
    }
    rebuild(values, path, pos)
}

fn rebuild(
    mut values: HashMap<String, (Vec<usize>, Vec<f64>)>,
    path: &Path,
    data_start: usize,
) -> Result<(MicroSegNet, Option<OptimizerState>)> {
    let mut take = |name: &str, shape: Option<&[usize]>| -> Result<Vec<f64>> {
        let (s, v) = values
            .remove(name)
            .ok_or_else(|| Error::format(path, data_start, format!("missing entry `{name}`")))?;
        if let Some(want) = shape {
            if s != want {
                return Err(Error::format(
                    path,
                    data_start,
                    format!("entry `{name}` has shape {s:?}, expected {want:?}"),
                ));
            }
        }
        Ok(v)
    };
    let meta = take("model.meta", Some(&[3]))?;
    let bn_mode = match meta[2] as u8 {
        0 => BnMode::Dsbn,
        1 => BnMode::Trainable,
        2 => BnMode::Fixed,
        other => return Err(Error::format(path, data_start, format!("unknown bn mode code {other}"))),
    };
    let cfg = ModelConfig {
        width: meta[0] as usize,
        bn_mode,
        ..Default::default()
    };
    let classes = meta[1] as usize;
    let mut net = MicroSegNet::new(&cfg, classes, 0).map_err(|e| Error::format(path, data_start, e.to_string()))?;
    let names = net.param_names();
    for (name, t) in names.iter().zip(net.params_mut()) {
        let shape = t.shape().to_vec();
        let v = take(name, Some(&shape))?;
        *t = Tensor::new(&shape, v)?;
    }
    for (i, n) in net.norms.iter_mut().enumerate() {
        let c = [n.channels()];
        n.weak.mean = take(&format!("bn{i}.weak_mean"), Some(&c))?;
        n.weak.var = take(&format!("bn{i}.weak_var"), Some(&c))?;
        n.strong.mean = take(&format!("bn{i}.strong_mean"), Some(&c))?;
        n.strong.var = take(&format!("bn{i}.strong_var"), Some(&c))?;
        let st = take(&format!("bn{i}.state"), Some(&[5]))?;
        n.momentum = st[0];
        n.eps = st[1];
        n.restore_counters(st[2] != 0.0, st[3] as u64, st[4] as u64);
    }
    let opt = match take("optimizer.hparams", Some(&[6])) {
        Ok(h) => {
            let mut velocity = Vec::new();
            for (name, t) in names.iter().zip(net.params()) {
                velocity.push(take(&format!("optimizer.velocity.{name}"), Some(&[t.numel()]))?);
            }
            Some(OptimizerState {
                velocity,
                base_lr: h[0],
                power: h[1],
                iter: h[2] as usize,
                iter_max: h[3] as usize,
                momentum: h[4],
                weight_decay: h[5],
            })
        }
        Err(_) => None,
    };
    if let Some(extra) = values.keys().next() {
        return Err(Error::format(path, data_start, format!("unexpected entry `{extra}`")));
    }
    Ok((net, opt))
}
