//! Convolution kernels over single `[C, H, W]` samples.
//!
//! Output extents, with zero padding `p` applied to every border:
//!
//! * conv2d: `out = (in + 2p - k) / s + 1` (floor division), requires
//!   `in + 2p >= k`.
//! * transposed conv2d: `out = (in - 1) * s - 2p + k`, requires `out >= 1`.
//!
//! Conv weights are `[C_out, C_in, k_h, k_w]`; transposed-conv weights are
//! `[C_in, C_out, k_h, k_w]`. Both lower to im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn conv_out(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::invalid("convolution stride must be >= 1"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::invalid(format!(
                "kernel {kernel} exceeds padded input {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    pub fn transposed_out(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || input == 0 {
            return Err(Error::invalid("transposed convolution needs stride >= 1 and input >= 1"));
        }
        let full = (input - 1) * self.stride + kernel;
        if full <= 2 * self.padding {
            return Err(Error::invalid(format!(
                "padding {} leaves no transposed-conv output",
                self.padding
            )));
        }
        Ok(full - 2 * self.padding)
    }
}

/// Spatial layout of one convolution: the "image" side `[c, h, w]` and the
/// column side `[out_h, out_w]` for a `kh × kw` kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

impl Layout {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Image offset for column `(oy, ox)` and kernel tap `(ky, kx)`, or
    /// `None` in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.geom.stride + ky).checked_sub(self.geom.padding)?;
        let x = (ox * self.geom.stride + kx).checked_sub(self.geom.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

pub(crate) fn im2col<F: Float>(image: &[F], l: &Layout) -> Vec<F> {
    let mut cols = vec![F::zero(); l.rows() * l.cols()];
    for c in 0..l.c {
        for ky in 0..l.kh {
            for kx in 0..l.kw {
                let row = (c * l.kh + ky) * l.kw + kx;
                let dst = &mut cols[row * l.cols()..(row + 1) * l.cols()];
                for oy in 0..l.out_h {
                    for ox in 0..l.out_w {
                        if let Some((y, x)) = l.source(oy, ox, ky, kx) {
                            dst[oy * l.out_w + ox] = image[(c * l.h + y) * l.w + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
pub(crate) fn col2im<F: Float>(cols: &[F], l: &Layout) -> Vec<F> {
    let mut image = vec![F::zero(); l.c * l.h * l.w];
    for c in 0..l.c {
        for ky in 0..l.kh {
            for kx in 0..l.kw {
                let row = (c * l.kh + ky) * l.kw + kx;
                let src = &cols[row * l.cols()..(row + 1) * l.cols()];
                for oy in 0..l.out_h {
                    for ox in 0..l.out_w {
                        if let Some((y, x)) = l.source(oy, ox, ky, kx) {
                            image[(c * l.h + y) * l.w + x] += src[oy * l.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    image
}

/// Layout for conv2d with input `[c_in, h, w]` and weight `[c_out, c_in, kh, kw]`.
pub(crate) fn conv_layout(
    x_shape: &[usize],
    w_shape: &[usize],
    geom: ConvGeometry,
) -> Result<(Layout, usize)> {
    if x_shape.len() != 3 || w_shape.len() != 4 || x_shape[0] != w_shape[1] {
        return Err(Error::shape("conv2d", x_shape, w_shape));
    }
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let layout = Layout {
        c: x_shape[0],
        h: x_shape[1],
        w: x_shape[2],
        kh,
        kw,
        out_h: geom.conv_out(x_shape[1], kh)?,
        out_w: geom.conv_out(x_shape[2], kw)?,
        geom,
    };
    Ok((layout, w_shape[0]))
}

/// Layout for a transposed conv with input `[c_in, h, w]` and weight
/// `[c_in, c_out, kh, kw]`. The returned layout describes the *output* as the
/// image side, the input grid as the column side.
pub(crate) fn transposed_layout(
    x_shape: &[usize],
    w_shape: &[usize],
    geom: ConvGeometry,
) -> Result<Layout> {
    if x_shape.len() != 3 || w_shape.len() != 4 || x_shape[0] != w_shape[0] {
        return Err(Error::shape("transposed_conv2d", x_shape, w_shape));
    }
    let (kh, kw) = (w_shape[2], w_shape[3]);
    Ok(Layout {
        c: w_shape[1],
        h: geom.transposed_out(x_shape[1], kh)?,
        w: geom.transposed_out(x_shape[2], kw)?,
        kh,
        kw,
        out_h: x_shape[1],
        out_w: x_shape[2],
        geom,
    })
}

pub(crate) fn conv_forward<F: Float>(x: &[F], w: &[F], l: &Layout, c_out: usize) -> Vec<F> {
    let cols = im2col(x, l);
    let mut out = vec![F::zero(); c_out * l.cols()];
    gemm(c_out, l.rows(), l.cols(), w, false, &cols, false, &mut out, false);
    out
}

pub(crate) fn conv_backward_input<F: Float>(
    grad: &[F],
    w: &[F],
    l: &Layout,
    c_out: usize,
) -> Vec<F> {
    let mut dcols = vec![F::zero(); l.rows() * l.cols()];
    gemm(l.rows(), c_out, l.cols(), w, true, grad, false, &mut dcols, false);
    col2im(&dcols, l)
}

pub(crate) fn conv_backward_weight<F: Float>(
    grad: &[F],
    x: &[F],
    l: &Layout,
    c_out: usize,
) -> Vec<F> {
    let cols = im2col(x, l);
    let mut dw = vec![F::zero(); c_out * l.rows()];
    gemm(c_out, l.cols(), l.rows(), grad, false, &cols, true, &mut dw, false);
    dw
}

pub(crate) fn transposed_forward<F: Float>(x: &[F], w: &[F], l: &Layout, c_in: usize) -> Vec<F> {
    let mut cols = vec![F::zero(); l.rows() * l.cols()];
    gemm(l.rows(), c_in, l.cols(), w, true, x, false, &mut cols, false);
    col2im(&cols, l)
}

pub(crate) fn transposed_backward_input<F: Float>(
    grad: &[F],
    w: &[F],
    l: &Layout,
    c_in: usize,
) -> Vec<F> {
    let cols = im2col(grad, l);
    let mut dx = vec![F::zero(); c_in * l.cols()];
    gemm(c_in, l.rows(), l.cols(), w, false, &cols, false, &mut dx, false);
    dx
}

pub(crate) fn transposed_backward_weight<F: Float>(
    grad: &[F],
    x: &[F],
    l: &Layout,
    c_in: usize,
) -> Vec<F> {
    let cols = im2col(grad, l);
    let mut dw = vec![F::zero(); c_in * l.rows()];
    gemm(c_in, l.cols(), l.rows(), x, false, &cols, true, &mut dw, false);
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_arithmetic() {
        let g = ConvGeometry::new(2, 0);
        assert_eq!(g.conv_out(32, 4).unwrap(), 15);
        assert_eq!(ConvGeometry::new(1, 1).transposed_out(15, 3).unwrap(), 15);
        assert_eq!(ConvGeometry::new(2, 1).transposed_out(15, 4).unwrap(), 30);
        assert_eq!(ConvGeometry::new(1, 0).transposed_out(30, 3).unwrap(), 32);
        assert!(ConvGeometry::new(1, 0).conv_out(2, 3).is_err());
        assert!(ConvGeometry::new(0, 0).conv_out(8, 3).is_err());
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &[f64], xs: [usize; 3], w: &[f64], ws: [usize; 4], g: ConvGeometry) -> Vec<f64> {
        let oh = g.conv_out(xs[1], ws[2]).unwrap();
        let ow = g.conv_out(xs[2], ws[3]).unwrap();
        let mut out = vec![0.0; ws[0] * oh * ow];
        for co in 0..ws[0] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..ws[1] {
                        for ky in 0..ws[2] {
                            for kx in 0..ws[3] {
                                let y = (oy * g.stride + ky) as isize - g.padding as isize;
                                let xx = (ox * g.stride + kx) as isize - g.padding as isize;
                                if y < 0 || xx < 0 || y >= xs[1] as isize || xx >= xs[2] as isize {
                                    continue;
                                }
                                acc += x[(ci * xs[1] + y as usize) * xs[2] + xx as usize]
                                    * w[((co * ws[1] + ci) * ws[2] + ky) * ws[3] + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_naive() {
        let xs = [2, 5, 6];
        let ws = [3, 2, 3, 2];
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..36).map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.5).collect();
        for g in [ConvGeometry::new(1, 0), ConvGeometry::new(2, 1), ConvGeometry::new(3, 2)] {
            let (l, co) = conv_layout(&xs, &ws, g).unwrap();
            assert_eq!(conv_forward(&x, &w, &l, co), naive_conv(&x, xs, &w, ws, g));
        }
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)> when the transposed conv reuses the
        // same weights.
        let xs = [2, 7, 7];
        let ws = [3, 2, 3, 3];
        let g = ConvGeometry::new(2, 1);
        let x: Vec<f64> = (0..98).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.91).cos()).collect();
        let (l, co) = conv_layout(&xs, &ws, g).unwrap();
        let y_len = co * l.out_h * l.out_w;
        let y: Vec<f64> = (0..y_len).map(|i| (i as f64 * 1.3).sin()).collect();
        let lhs: f64 = conv_forward(&x, &w, &l, co).iter().zip(&y).map(|(a, b)| a * b).sum();

        let tl = transposed_layout(&[co, l.out_h, l.out_w], &ws, g).unwrap();
        assert_eq!((tl.c, tl.h, tl.w), (2, 7, 7));
        let back = transposed_forward(&y, &w, &tl, co);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
