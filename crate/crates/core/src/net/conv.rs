//! Stride-1 2-D convolution via im2col.
//!
//! A batch of images is a `B × (H·W·C)` matrix (HWC order per row). The
//! patch matrix has one row per output position, `B·Ho·Wo` rows, and
//! `kh·kw·C` columns ordered `(ki, kj, c)`, which matches a kernel stored as
//! a `(kh·kw·c_in) × c_out` matrix. The product `patches · K` is then the
//! `(B·Ho·Wo) × c_out` output, whose row-major data is already the
//! `B × (Ho·Wo·c_out)` batch layout.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::factorized::FactorizedParam;
use crate::net::spec::{ConvSpec, Padding};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, conv: &ConvSpec) -> Result<Self> {
        let (kh, kw) = (conv.kernel_h, conv.kernel_w);
        let (out_h, out_w, pad_top, pad_left) = match conv.padding {
            Padding::Same => (in_h, in_w, (kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => {
                if in_h < kh || in_w < kw {
                    return Err(Error::shape(format!("{kh}x{kw} kernel larger than {in_h}x{in_w} input")));
                }
                (in_h - kh + 1, in_w - kw + 1, 0, 0)
            }
        };
        Ok(Self {
            in_h,
            in_w,
            in_c: conv.in_channels,
            kh,
            kw,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_size(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ki, kj)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy + ki).checked_sub(self.pad_top)?;
        let x = (ox + kj).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

pub fn im2col(input: &Matrix, g: &ConvGeometry) -> Result<Matrix> {
    if input.cols() != g.input_size() {
        return Err(Error::shape(format!(
            "conv input has {} features, geometry expects {}",
            input.cols(),
            g.input_size()
        )));
    }
    let batch = input.rows();
    let p = g.patch_size();
    let mut out = Matrix::zeros(batch * g.positions(), p);
    let c = g.in_c;
    for b in 0..batch {
        let img = input.row(b);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = out.row_mut((b * g.out_h + oy) * g.out_w + ox);
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                            let src = (y * g.in_w + x) * c;
                            let dst = (ki * g.kw + kj) * c;
                            row[dst..dst + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub fn col2im(patches: &Matrix, g: &ConvGeometry, batch: usize) -> Matrix {
    let mut out = Matrix::zeros(batch, g.input_size());
    let c = g.in_c;
    for b in 0..batch {
        let img = out.row_mut(b);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = patches.row((b * g.out_h + oy) * g.out_w + ox);
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                            let dst = (y * g.in_w + x) * c;
                            let src = (ki * g.kw + kj) * c;
                            for (o, v) in img[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `B × (Ho·Wo·c_out)` back to `(B·Ho·Wo) × c_out`, or the reverse.
pub(crate) fn regroup(m: Matrix, rows: usize, cols: usize) -> Matrix {
    m.reshape(rows, cols).expect("regroup preserves length")
}

/// Single convolution with a `(kh·kw·c_in) × c_out` kernel matrix.
pub fn conv2d(input: &Matrix, g: &ConvGeometry, kernel: &Matrix) -> Result<Matrix> {
    if kernel.rows() != g.patch_size() {
        return Err(Error::shape(format!(
            "kernel has {} rows, patches have {}",
            kernel.rows(),
            g.patch_size()
        )));
    }
    let out = im2col(input, g)?.matmul(kernel)?;
    Ok(regroup(out, input.rows(), g.positions() * kernel.cols()))
}

/// Factorized convolution as two convolutions: the `kh × kw` kernel `U`
/// (down to `r` channels) followed by the `1 × 1` kernel `Vᵀ`.
pub fn conv2d_factorized(input: &Matrix, g: &ConvGeometry, p: &FactorizedParam) -> Result<Matrix> {
    if p.u.rows() != g.patch_size() {
        return Err(Error::shape(format!(
            "factor U has {} rows, patches have {}",
            p.u.rows(),
            g.patch_size()
        )));
    }
    let hidden = im2col(input, g)?.matmul(&p.u)?;
    let out = hidden.matmul_t(&p.v)?;
    Ok(regroup(out, input.rows(), g.positions() * p.v.rows()))
}
