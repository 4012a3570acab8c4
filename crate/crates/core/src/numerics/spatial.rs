//! Per-pixel softmax over channels and bilinear resizing.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Channel softmax of raw NCHW data, max-subtracted.
pub fn softmax_channels(data: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let mut z = vec![0.0; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for (ch, zc) in z.iter_mut().enumerate() {
                *zc = data[base + ch * plane + p];
                m = m.max(*zc);
            }
            let mut s = 0.0;
            for zc in z.iter_mut() {
                *zc = (*zc - m).exp();
                s += *zc;
            }
            for (ch, zc) in z.iter().enumerate() {
                out[base + ch * plane + p] = zc / s;
            }
        }
    }
    out
}

/// Source taps for one axis of an align-corners-false bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = if lo + 1 < src { lo + 1 } else { lo };
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of raw NCHW planes. Same size is an exact copy.
pub fn resize_planes(data: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return data.to_vec();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, y) in ty.iter().enumerate() {
            let r0 = &src[y.lo * w..(y.lo + 1) * w];
            let r1 = &src[y.hi * w..(y.hi + 1) * w];
            for (ox, x) in tx.iter().enumerate() {
                let top = r0[x.lo] + (r0[x.hi] - r0[x.lo]) * x.frac;
                let bottom = r1[x.lo] + (r1[x.hi] - r1[x.lo]) * x.frac;
                dst[oy * ow + ox] = top + (bottom - top) * y.frac;
            }
        }
    }
    out
}

fn resize_planes_backward(
    grad: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    if h == oh && w == ow {
        return grad.to_vec();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let (top, bottom) = (v * (1.0 - y.frac), v * y.frac);
                dst[y.lo * w + x.lo] += top * (1.0 - x.frac);
                dst[y.lo * w + x.hi] += top * x.frac;
                dst[y.hi * w + x.lo] += bottom * (1.0 - x.frac);
                dst[y.hi * w + x.hi] += bottom * x.frac;
            }
        }
    }
    out
}

impl Tape {
    /// Softmax over the channel axis of an `[N,C,H,W]` tensor.
    pub fn softmax_channel(&mut self, logits: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4("softmax_channel input")?;
        if c < 2 {
            return Err(Error::Dimension(format!(
                "softmax_channel needs at least 2 channels, got {c}"
            )));
        }
        let plane = h * w;
        let out = softmax_channels(self.value(logits).data(), n, c, plane);
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.record(
            "softmax_channel",
            out,
            &[logits],
            Box::new(move |ctx| {
                let p = ctx.output.data();
                let g = ctx.grad_out;
                let mut dz = vec![0.0; p.len()];
                for b in 0..n {
                    let base = b * c * plane;
                    for px in 0..plane {
                        let dot: f64 = (0..c)
                            .map(|ch| g[base + ch * plane + px] * p[base + ch * plane + px])
                            .sum();
                        for ch in 0..c {
                            let i = base + ch * plane + px;
                            dz[i] = p[i] * (g[i] - dot);
                        }
                    }
                }
                vec![Some(dz)]
            }),
        )
    }

    /// Align-corners-false bilinear resize to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("resize_bilinear input")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "resize_bilinear from {h}x{w} to {out_h}x{out_w}: extents must be positive"
            )));
        }
        let out = resize_planes(self.value(x).data(), n * c, h, w, out_h, out_w);
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        self.record(
            "resize_bilinear",
            out,
            &[x],
            Box::new(move |ctx| {
                vec![Some(resize_planes_backward(ctx.grad_out, n * c, h, w, out_h, out_w))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_softmax(shape: &[usize], data: Vec<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape, data).unwrap());
        let y = tape.softmax_channel(x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = run_softmax(&[1, 4, 1, 1], vec![3.0; 4]);
        assert!(p.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn closed_form_pair() {
        let p = run_softmax(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_channel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.softmax_channel(x).is_err());
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 7).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3, 5, 7], data.clone()).unwrap());
        let y = tape.resize_bilinear(x, 5, 7).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 5], 0.3));
        for (oh, ow) in [(1, 1), (7, 2), (12, 20)] {
            let y = tape.resize_bilinear(x, oh, ow).unwrap();
            assert!(tape.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn resize_zero_extent_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(tape.resize_bilinear(x, 0, 3), Err(Error::Dimension(_))));
    }
}
