use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Stride, zero padding and dilation of a 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            dilation: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * a_rs + (k - 1) * a_cs < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * b_rs + (n - 1) * b_cs < b.len(), "gemm: rhs out of bounds");
    }
    assert!(c.len() >= m * n, "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let Conv2dSpec {
        stride,
        padding,
        dilation,
    } = g.spec;
    let plane = g.out_plane();
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let Conv2dSpec {
        stride,
        padding,
        dilation,
    } = g.spec;
    let plane = g.out_plane();
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-d cross-correlation of `input[N,C,H,W]` with `kernel[K,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("conv2d input")?;
        let (k, kc, kh, kw) = self.value(kernel).dims4("conv2d kernel")?;
        let mismatch = || {
            Error::Dimension(format!(
                "conv2d: input {:?} incompatible with kernel {:?} ({spec:?})",
                [n, c, h, w],
                [k, kc, kh, kw]
            ))
        };
        if kc != c || kh % 2 == 0 || kw % 2 == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(mismatch());
        }
        let oh = spec.output_extent(h, kh).ok_or_else(mismatch)?;
        let ow = spec.output_extent(w, kw).ok_or_else(mismatch)?;
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let (patch, plane) = (g.patch(), g.out_plane());
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let mut out = vec![0.0; n * k * plane];
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { patch * plane }];
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let cols_b: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            let ob = &mut out[b * k * plane..(b + 1) * k * plane];
            gemm(k, patch, plane, wt, (patch, 1), cols_b, (plane, 1), 0.0, ob);
        }
        let out = Tensor::new(&[n, k, oh, ow], out)?;
        self.record(
            "conv2d",
            out,
            &[input, kernel],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let wt = ctx.inputs[1].data();
                let mut dx = ctx.needs[0].then(|| vec![0.0; n * c * h * w]);
                let mut dw = ctx.needs[1].then(|| vec![0.0; k * patch]);
                let mut cols = vec![0.0; patch * plane];
                let mut dcols = vec![0.0; patch * plane];
                for b in 0..n {
                    let gb = &ctx.grad_out[b * k * plane..(b + 1) * k * plane];
                    if let Some(dw) = dw.as_mut() {
                        let xb = &x[b * c * h * w..(b + 1) * c * h * w];
                        let cols_b: &[f64] = if g.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, &g, &mut cols);
                            &cols
                        };
                        gemm(k, plane, patch, gb, (plane, 1), cols_b, (1, plane), 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                        if g.is_pointwise() {
                            gemm(patch, k, plane, wt, (1, patch), gb, (plane, 1), 1.0, dxb);
                        } else {
                            gemm(patch, k, plane, wt, (1, patch), gb, (plane, 1), 0.0, &mut dcols);
                            col2im(&dcols, &g, dxb);
                        }
                    }
                }
                vec![dx, dw]
            }),
        )
    }
}
