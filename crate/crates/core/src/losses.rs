//! Per-pixel cross-entropy and the self-correction loss.
//!
//! The self-correction loss blends, per pixel, cross-entropy against the hard
//! pseudo label with a reverse cross-entropy term, weighting the two by the
//! prediction's own max-softmax confidence `w`:
//!
//! ```text
//! ℓ = w·(−log p_t) + (1 − w)·(−A)·(1 − p_t)
//! ```
//!
//! where `t` is the pseudo class and `A < 0` stands in for `log 0` on the
//! off-target entries of the one-hot label.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const IGNORE_INDEX: u8 = 255;

/// Summary of a loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Mean over contributing pixels.
    pub loss: f64,
    /// Number of non-ignored pixels.
    pub count: usize,
    /// Per-pixel confidence weight `w` (all ones for cross-entropy).
    pub weights: Vec<f64>,
}

/// Where the per-pixel weight `w` comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SclWeight {
    /// Max softmax, treated as a constant by the backward pass.
    Detached,
    /// Max softmax with its gradient included.
    Attached,
    /// `w ≡ 1`; reduces to cross-entropy.
    Unit,
    /// Caller-supplied weights, one per pixel.
    Frozen(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SclConfig {
    /// Stand-in for `log 0` in the reverse term; must be negative.
    pub log_clamp: f64,
    pub weight: SclWeight,
}

impl Default for SclConfig {
    fn default() -> Self {
        SclConfig {
            log_clamp: -4.0,
            weight: SclWeight::Detached,
        }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.log_clamp < 0.0 && self.log_clamp.is_finite()) {
            return Err(Error::Config(format!(
                "scl log clamp must be a finite negative number, got {}",
                self.log_clamp
            )));
        }
        Ok(())
    }
}

struct PixelView {
    n: usize,
    c: usize,
    plane: usize,
}

impl PixelView {
    fn index(&self, pixel: usize, ch: usize) -> usize {
        let (b, p) = (pixel / self.plane, pixel % self.plane);
        (b * self.c + ch) * self.plane + p
    }

    fn pixels(&self) -> usize {
        self.n * self.plane
    }
}

fn validate(tape: &Tape, logits: Var, labels: &[u8], ignore: u8) -> Result<PixelView> {
    let (n, c, h, w) = tape.value(logits).dims4("loss logits")?;
    if c < 2 {
        return Err(Error::Dimension(format!("losses need at least 2 classes, got {c}")));
    }
    let view = PixelView { n, c, plane: h * w };
    if labels.len() != view.pixels() {
        return Err(Error::Dimension(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            tape.shape(logits)
        )));
    }
    if let Some((index, &value)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l != ignore && l as usize >= c)
    {
        return Err(Error::LabelDomain {
            value,
            index,
            classes: c,
        });
    }
    Ok(view)
}

/// Softmax and log-softmax at one pixel.
fn pixel_softmax(z: &[f64], p: &mut [f64], logp: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let lse = m + s.ln();
    for ((zi, pi), li) in z.iter().zip(p.iter_mut()).zip(logp.iter_mut()) {
        *li = zi - lse;
        *pi = (zi - m).exp() / s;
    }
}

/// Mean per-pixel cross-entropy over non-ignored pixels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8], ignore: u8) -> Result<(Var, LossOutput)> {
    scl_inner(tape, logits, labels, ignore, &SclConfig { log_clamp: -4.0, weight: SclWeight::Unit }, "cross_entropy")
}

/// Mean per-pixel self-correction loss over non-ignored pixels.
pub fn scl(
    tape: &mut Tape,
    logits: Var,
    pseudo_labels: &[u8],
    ignore: u8,
    cfg: &SclConfig,
) -> Result<(Var, LossOutput)> {
    scl_inner(tape, logits, pseudo_labels, ignore, cfg, "scl")
}

fn scl_inner(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    ignore: u8,
    cfg: &SclConfig,
    op: &'static str,
) -> Result<(Var, LossOutput)> {
    let view = validate(tape, logits, labels, ignore)?;
    cfg.validate()?;
    if let SclWeight::Frozen(w) = &cfg.weight {
        if w.len() != view.pixels() {
            return Err(Error::Dimension(format!(
                "{} frozen weights for {} pixels",
                w.len(),
                view.pixels()
            )));
        }
    }
    let c = view.c;
    let a = cfg.log_clamp;
    let z = tape.value(logits).data();
    let mut probs = vec![0.0; z.len()];
    let mut weights = vec![1.0; view.pixels()];
    let mut argmax = vec![0usize; view.pixels()];
    let mut target_nll = vec![0.0; view.pixels()];
    let mut zp = vec![0.0; c];
    let mut pp = vec![0.0; c];
    let mut lp = vec![0.0; c];
    let mut total = 0.0;
    let mut count = 0usize;
    for px in 0..view.pixels() {
        for ch in 0..c {
            zp[ch] = z[view.index(px, ch)];
        }
        pixel_softmax(&zp, &mut pp, &mut lp);
        let (am, pmax) = pp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        argmax[px] = am;
        weights[px] = match &cfg.weight {
            SclWeight::Detached | SclWeight::Attached => pmax,
            SclWeight::Unit => 1.0,
            SclWeight::Frozen(w) => w[px],
        };
        for ch in 0..c {
            probs[view.index(px, ch)] = pp[ch];
        }
        let t = labels[px];
        if t == ignore {
            continue;
        }
        let t = t as usize;
        let w = weights[px];
        let forward = -lp[t];
        target_nll[px] = forward;
        let l = if w == 1.0 { forward } else { w * forward + (1.0 - w) * (-a) * (1.0 - pp[t]) };
        total += l;
        count += 1;
    }
    let loss = if count > 0 { total / count as f64 } else { 0.0 };
    let attached = cfg.weight == SclWeight::Attached;
    let labels = labels.to_vec();
    let w_saved = weights.clone();
    let value = tape.record(
        op,
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |ctx| {
            let mut dz = vec![0.0; probs.len()];
            if count == 0 {
                return vec![Some(dz)];
            }
            let scale = ctx.grad_out[0] / count as f64;
            for (px, &t) in labels.iter().enumerate() {
                if t == ignore {
                    continue;
                }
                let t = t as usize;
                let w = w_saved[px];
                let pt = probs[view.index(px, t)];
                for j in 0..c {
                    let pj = probs[view.index(px, j)];
                    let delta = if j == t { 1.0 } else { 0.0 };
                    // forward term and reverse term with w held fixed
                    let mut g = w * (pj - delta) + (1.0 - w) * a * pt * (delta - pj);
                    if attached {
                        let m = argmax[px];
                        let pm = probs[view.index(px, m)];
                        let dw = pm * (if j == m { 1.0 } else { 0.0 } - pj);
                        let dl_dw = target_nll[px] + a * (1.0 - pt);
                        g += dl_dw * dw;
                    }
                    dz[view.index(px, j)] = g * scale;
                }
            }
            vec![Some(dz)]
        }),
    )?;
    Ok((value, LossOutput { loss, count, weights }))
}
