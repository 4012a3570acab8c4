//! Batch normalization with distribution-specific running statistics.
//!
//! A [`DsbnState`] holds one set of affine parameters and two banks of
//! running statistics. Batches tagged [`BranchTag::Weak`] use and update the
//! weak bank; batches tagged [`BranchTag::Strong`] update the parallel
//! (strong) bank, which is seeded from the weak bank the first time it is
//! needed and never read at evaluation time.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which distribution a training batch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchTag {
    Weak,
    Strong,
}

/// How normalization layers treat running statistics during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Separate banks per branch tag.
    Dsbn,
    /// Single bank: every batch, whatever its tag, updates the weak bank.
    Trainable,
    /// Normalize with the frozen weak bank; no bank is ever updated.
    Fixed,
}

impl std::str::FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsbn" => Ok(BnMode::Dsbn),
            "trainable" | "trainable-bn" => Ok(BnMode::Trainable),
            "fixed" | "fixed-bn" => Ok(BnMode::Fixed),
            other => Err(Error::Config(format!("unknown bn mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for BnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BnMode::Dsbn => "dsbn",
            BnMode::Trainable => "trainable",
            BnMode::Fixed => "fixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `new = momentum·old + (1 − momentum)·batch`, channelwise.
    fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (momentum * *r + (1.0 - momentum) * b).max(0.0);
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in self.mean.iter().chain(&self.var) {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Per-channel mean and biased variance of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsbnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub weak: RunningStats,
    pub strong: RunningStats,
    /// Weight on the old running value.
    pub momentum: f64,
    pub eps: f64,
    pbn_initialized: bool,
    weak_updates: u64,
    strong_updates: u64,
}

impl DsbnState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Config(format!("bn epsilon must be > 0, got {eps}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("bn momentum must lie in [0,1], got {momentum}")));
        }
        Ok(DsbnState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            weak: RunningStats::new(channels),
            strong: RunningStats::new(channels),
            momentum,
            eps,
            pbn_initialized: false,
            weak_updates: 0,
            strong_updates: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn pbn_initialized(&self) -> bool {
        self.pbn_initialized
    }

    pub fn weak_updates(&self) -> u64 {
        self.weak_updates
    }

    pub fn strong_updates(&self) -> u64 {
        self.strong_updates
    }

    /// Restores bookkeeping read back from a checkpoint.
    pub fn restore_counters(&mut self, pbn_initialized: bool, weak_updates: u64, strong_updates: u64) {
        self.pbn_initialized = pbn_initialized;
        self.weak_updates = weak_updates;
        self.strong_updates = strong_updates;
    }

    /// Seeds the strong bank with a copy of the weak bank.
    pub fn init_pbn(&mut self) {
        self.strong = self.weak.clone();
        self.pbn_initialized = true;
    }

    /// Strong bank as it would be reported: the weak bank until seeded.
    pub fn effective_strong(&self) -> &RunningStats {
        if self.pbn_initialized {
            &self.strong
        } else {
            &self.weak
        }
    }
}

fn batch_stats(x: &[f64], n: usize, c: usize, plane: usize) -> BatchStats {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let planes = || (0..n).map(move |b| &x[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
        // Shifted by the first element so a constant channel yields its value exactly.
        let shift = x[ch * plane];
        let s: f64 = planes().flat_map(|p| p.iter()).map(|v| v - shift).sum();
        let mu = shift + s / m;
        let ss: f64 = planes().flat_map(|p| p.iter()).map(|v| (v - mu) * (v - mu)).sum();
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    BatchStats { mean, var }
}

/// Normalizes with batch statistics and records the op; returns the stats too.
fn batch_norm_op(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
    let (n, c, h, w) = tape.value(x).dims4("batch norm input")?;
    let plane = h * w;
    if n * plane < 2 {
        return Err(Error::BatchSize(format!(
            "batch statistics need N·H·W ≥ 2, got input shape {:?}",
            tape.shape(x)
        )));
    }
    check_affine_shapes(tape, gamma, beta, c)?;
    let stats = batch_stats(tape.value(x).data(), n, c, plane);
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xd = tape.value(x).data();
    let (g, bt) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for (i, (chunk, o)) in xd.chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
        let ch = i % c;
        let xh = &mut xhat[i * plane..(i + 1) * plane];
        for ((v, xhv), ov) in chunk.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
            *xhv = (v - stats.mean[ch]) * inv_std[ch];
            *ov = g[ch] * *xhv + bt[ch];
        }
    }
    let out = Tensor::new(&[n, c, h, w], out)?;
    let m = (n * plane) as f64;
    let var = tape.record(
        "batch_norm",
        out,
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let gamma = ctx.inputs[1].data();
            let gout = ctx.grad_out;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (i, (gc, xc)) in gout.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                let ch = i % c;
                for (gv, xv) in gc.iter().zip(xc) {
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xv;
                }
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![0.0; gout.len()];
                for (i, ((dc, gc), xc)) in dx
                    .chunks_mut(plane)
                    .zip(gout.chunks(plane))
                    .zip(xhat.chunks(plane))
                    .enumerate()
                {
                    let ch = i % c;
                    let k = gamma[ch] * inv_std[ch] / m;
                    for ((d, gv), xv) in dc.iter_mut().zip(gc).zip(xc) {
                        *d = k * (m * gv - sum_g[ch] - xv * sum_gx[ch]);
                    }
                }
                dx
            });
            vec![dx, ctx.needs[1].then(|| sum_gx.clone()), ctx.needs[2].then(|| sum_g.clone())]
        }),
    )?;
    Ok((var, stats))
}

fn check_affine_shapes(tape: &Tape, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::Dimension(format!(
            "affine parameters {:?}/{:?} do not match {c} channels",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    Ok(())
}

/// `γ·(x − mean)/√(var + ε) + β` with fixed statistics.
fn frozen_norm_op(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats,
    eps: f64,
) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4("batch norm input")?;
    check_affine_shapes(tape, gamma, beta, c)?;
    if stats.mean.len() != c {
        return Err(Error::Dimension(format!(
            "running statistics hold {} channels, input has {c}",
            stats.mean.len()
        )));
    }
    let plane = h * w;
    let mean = stats.mean.clone();
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (g, b) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut out = tape.value(x).data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = g[ch] * ((*v - mean[ch]) * inv_std[ch]) + b[ch];
        }
    }
    let out = Tensor::new(&[n, c, h, w], out)?;
    tape.record(
        "frozen_norm",
        out,
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let gamma = ctx.inputs[1].data();
            let gout = ctx.grad_out;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (i, (gc, xc)) in gout.chunks(plane).zip(x.chunks(plane)).enumerate() {
                let ch = i % c;
                for (gv, xv) in gc.iter().zip(xc) {
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                }
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = gout.to_vec();
                for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                    let ch = i % c;
                    chunk.iter_mut().for_each(|v| *v *= gamma[ch] * inv_std[ch]);
                }
                dx
            });
            vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
        }),
    )
}

/// Affine parameters of one normalization layer as bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Training-mode normalization. Routes the running-statistics update to the
/// bank selected by `tag` (under [`BnMode::Dsbn`]) and leaves the other bank
/// untouched.
pub fn bn_forward_train(
    tape: &mut Tape,
    x: Var,
    affine: AffineVars,
    state: &mut DsbnState,
    tag: BranchTag,
    mode: BnMode,
) -> Result<Var> {
    match mode {
        BnMode::Fixed => frozen_norm_op(tape, x, affine.gamma, affine.beta, &state.weak, state.eps),
        BnMode::Trainable => {
            let (y, stats) = batch_norm_op(tape, x, affine.gamma, affine.beta, state.eps)?;
            state.weak.update(&stats, state.momentum);
            state.weak_updates += 1;
            Ok(y)
        }
        BnMode::Dsbn => {
            let (y, stats) = batch_norm_op(tape, x, affine.gamma, affine.beta, state.eps)?;
            match tag {
                BranchTag::Weak => {
                    state.weak.update(&stats, state.momentum);
                    state.weak_updates += 1;
                }
                BranchTag::Strong => {
                    if !state.pbn_initialized {
                        state.init_pbn();
                    }
                    state.strong.update(&stats, state.momentum);
                    state.strong_updates += 1;
                }
            }
            Ok(y)
        }
    }
}

/// Evaluation-mode normalization using the weak bank only.
pub fn bn_forward_eval(tape: &mut Tape, x: Var, affine: AffineVars, state: &DsbnState) -> Result<Var> {
    frozen_norm_op(tape, x, affine.gamma, affine.beta, &state.weak, state.eps)
}

/// Convenience wrapper that binds the state's own affine parameters as constants.
pub fn bn_eval_tensor(x: &Tensor, state: &DsbnState) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let affine = AffineVars {
        gamma: tape.constant(state.gamma.clone()),
        beta: tape.constant(state.beta.clone()),
    };
    let y = bn_forward_eval(&mut tape, xv, affine, state)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnStatsRow {
    pub layer: String,
    pub channel: usize,
    pub weak_mean: f64,
    pub weak_var: f64,
    pub strong_mean: f64,
    pub strong_var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDivergence {
    pub layer: String,
    /// Mean over channels of |weak_mean − strong_mean|.
    pub mean_diff: f64,
    /// Mean over channels of |ln(weak_var + ε) − ln(strong_var + ε)|.
    pub log_var_diff: f64,
    pub strong_at_init: bool,
}

impl LayerDivergence {
    pub fn total(&self) -> f64 {
        self.mean_diff + self.log_var_diff
    }
}

/// Weak-versus-strong running statistics of every normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStatsReport {
    pub rows: Vec<BnStatsRow>,
    pub layers: Vec<LayerDivergence>,
    pub mean_diff: f64,
    pub log_var_diff: f64,
    /// Set when some layer's strong bank was never updated.
    pub strong_at_init: bool,
}

pub fn stats_report<'a>(layers: impl IntoIterator<Item = (String, &'a DsbnState)>) -> BnStatsReport {
    let mut rows = Vec::new();
    let mut per_layer = Vec::new();
    let (mut mean_acc, mut var_acc, mut count) = (0.0, 0.0, 0usize);
    for (name, state) in layers {
        let strong = state.effective_strong();
        let (mut lm, mut lv) = (0.0, 0.0);
        for ch in 0..state.channels() {
            let row = BnStatsRow {
                layer: name.clone(),
                channel: ch,
                weak_mean: state.weak.mean[ch],
                weak_var: state.weak.var[ch],
                strong_mean: strong.mean[ch],
                strong_var: strong.var[ch],
            };
            let dm = (row.weak_mean - row.strong_mean).abs();
            let dv = ((row.weak_var + state.eps).ln() - (row.strong_var + state.eps).ln()).abs();
            lm += dm;
            lv += dv;
            rows.push(row);
        }
        mean_acc += lm;
        var_acc += lv;
        count += state.channels();
        let ch = state.channels().max(1) as f64;
        per_layer.push(LayerDivergence {
            layer: name,
            mean_diff: lm / ch,
            log_var_diff: lv / ch,
            strong_at_init: state.strong_updates == 0,
        });
    }
    let denom = count.max(1) as f64;
    BnStatsReport {
        strong_at_init: per_layer.iter().any(|l| l.strong_at_init),
        rows,
        layers: per_layer,
        mean_diff: mean_acc / denom,
        log_var_diff: var_acc / denom,
    }
}

impl BnStatsReport {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "layer,channel,weak_mean,weak_var,strong_mean,strong_var")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.layer, r.channel, r.weak_mean, r.weak_var, r.strong_mean, r.strong_var
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "layer,mean_diff,log_var_diff,strong_at_init")?;
        for l in &self.layers {
            writeln!(out, "{},{},{},{}", l.layer, l.mean_diff, l.log_var_diff, l.strong_at_init)?;
        }
        writeln!(out, "all,{},{},{}", self.mean_diff, self.log_var_diff, self.strong_at_init)
    }

    pub fn save(&self, table: &Path, summary: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(table, e))?;
        std::fs::write(table, buf).map_err(|e| Error::io(table, e))?;
        let mut buf = Vec::new();
        self.write_summary_csv(&mut buf).map_err(|e| Error::io(summary, e))?;
        std::fs::write(summary, buf).map_err(|e| Error::io(summary, e))
    }
}
