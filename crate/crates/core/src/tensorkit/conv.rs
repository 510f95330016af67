//! im2col lowering for 2-D convolution (NCHW input, OIHW weights, square kernels).

use super::Element;
use crate::error::{Error, Result};

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c_in, h, w] = *x else {
            return Err(Error::Dimension(format!("conv2d input must be NCHW, got {x:?}")));
        };
        let [c_out, wc, kh, kw] = *weight else {
            return Err(Error::Dimension(format!(
                "conv2d weight must be [Cout, Cin, k, k], got {weight:?}"
            )));
        };
        if wc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d input has {c_in} channels but the weight expects {wc}"
            )));
        }
        if kh != kw {
            return Err(Error::Dimension(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let k = kh;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < k || wp < k {
            return Err(Error::Geometry(format!("kernel {k} exceeds padded input {hp}x{wp}")));
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (hp - k) / stride + 1,
            w_out: (wp - k) / stride + 1,
        })
    }

    /// Output positions per image.
    pub fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Rows of the lowered patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// True when the windows tile the padded input with no leftover rows or
    /// columns, so the sampling grid is symmetric under the dihedral group.
    pub fn is_exact(&self) -> bool {
        (self.h + 2 * self.pad - self.k).is_multiple_of(self.stride)
            && (self.w + 2 * self.pad - self.k).is_multiple_of(self.stride)
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }
}

/// Lower `x` to a `[c_in*k*k, n*h_out*w_out]` patch matrix.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let l = g.spatial_out();
    let cols_n = g.n * l;
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    for c in 0..g.c_in {
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (c * g.k + u) * g.k + v;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for i in 0..g.h_out {
                        let y = (i * g.stride + u) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let src = &plane[y as usize * g.w..][..g.w];
                        let dst = &mut dst_row[n * l + i * g.w_out..][..g.w_out];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let xx = (j * g.stride + v) as isize - g.pad as isize;
                            if xx >= 0 && xx < g.w as isize {
                                *d = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input grid.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let l = g.spatial_out();
    let cols_n = g.n * l;
    let mut dx = vec![T::zero(); g.n * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (c * g.k + u) * g.k + v;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for i in 0..g.h_out {
                        let y = (i * g.stride + u) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * g.w..][..g.w];
                        let src = &src_row[n * l + i * g.w_out..][..g.w_out];
                        for (j, &s) in src.iter().enumerate() {
                            let xx = (j * g.stride + v) as isize - g.pad as isize;
                            if xx >= 0 && xx < g.w as isize {
                                dst[xx as usize] = dst[xx as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
