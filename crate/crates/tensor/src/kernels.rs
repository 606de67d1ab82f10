//! Raw convolution and pooling kernels shared by the forward and backward passes.

use crate::element::{gemm, Element};
use crate::error::{geom_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Input was `[C, H, W]` rather than `[N, C, H, W]`.
    pub unbatched: bool,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, w, unbatched) = match *input {
            [c, h, w] => (1, c, h, w, true),
            [n, c, h, w] => (n, c, h, w, false),
            _ => {
                return Err(geom_err(
                    "conv2d",
                    format!("input must be [C,H,W] or [N,C,H,W], got {:?}", input),
                ))
            }
        };
        let [c_out, kc, kh, kw] = *kernel else {
            return Err(geom_err(
                "conv2d",
                format!("kernel must be [C_out,C_in,k,k], got {:?}", kernel),
            ));
        };
        if kc != c_in {
            return Err(geom_err(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", kc, c_in),
            ));
        }
        if kh != kw || kh == 0 {
            return Err(geom_err("conv2d", format!("kernel must be square, got {}x{}", kh, kw)));
        }
        if stride == 0 {
            return Err(geom_err("conv2d", "stride must be >= 1"));
        }
        let k = kh;
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(geom_err(
                "conv2d",
                format!("kernel {} exceeds padded input {}x{} (pad {})", k, h, w, pad),
            ));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
            unbatched,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        if self.unbatched {
            vec![self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.batch, self.c_out, self.h_out, self.w_out]
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
}

/// Unfolds one sample into a `[C_in·k·k, H_out·W_out]` matrix; padding reads as zero.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let kk = g.col_rows();
    let hw = g.col_cols();
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let mut cols = vec![T::zero(); kk * hw];
    for n in 0..g.batch {
        im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], g, &mut cols);
        let o = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        gemm(g.c_out, kk, hw, weight, false, &cols, false, o, false);
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for a convolution.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let kk = g.col_rows();
    let hw = g.col_cols();
    let mut cols = vec![T::zero(); kk * hw];
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], g, &mut cols);
            gemm(g.c_out, hw, kk, go, false, &cols, true, dw, true);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in go.chunks(hw).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(kk, g.c_out, hw, weight, true, go, false, &mut cols, false);
            col2im_add(&cols, g, &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize, strict: bool) -> Result<(Self, Vec<usize>)> {
        let (lead, h, w) = match input {
            [c, h, w] => (vec![*c], *h, *w),
            [n, c, h, w] => (vec![*n, *c], *h, *w),
            _ => {
                return Err(geom_err(
                    "max_pool2d",
                    format!("input must be [C,H,W] or [N,C,H,W], got {:?}", input),
                ))
            }
        };
        if window == 0 || stride == 0 {
            return Err(geom_err("max_pool2d", "window and stride must be >= 1"));
        }
        if window > h || window > w {
            return Err(geom_err(
                "max_pool2d",
                format!("window {} exceeds input {}x{}", window, h, w),
            ));
        }
        if strict && window == stride && (h % stride != 0 || w % stride != 0) {
            return Err(geom_err(
                "max_pool2d",
                format!("{}x{} is not divisible by stride {}", h, w, stride),
            ));
        }
        let h_out = (h - window) / stride + 1;
        let w_out = (w - window) / stride + 1;
        let planes = lead.iter().product();
        let mut out_shape = lead;
        out_shape.extend([h_out, w_out]);
        Ok((
            Self {
                planes,
                h,
                w,
                window,
                stride,
                h_out,
                w_out,
            },
            out_shape,
        ))
    }
}

/// Max over each window; ties resolve to the first element in row-major order.
/// Returns the pooled values and the flat input index each one came from.
pub fn max_pool_forward<T: Element>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let n_out = g.planes * g.h_out * g.w_out;
    let mut out = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut best_idx = base + oy * g.stride * g.w + ox * g.stride;
                let mut best = x[best_idx];
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let idx = base + (oy * g.stride + dy) * g.w + ox * g.stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}
