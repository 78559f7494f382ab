//! im2col helpers for "same"-padded square convolutions.

use super::{NumericsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output size `ceil(in / stride)`, padding split with the extra pixel
    /// on the bottom/right.
    pub fn same(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        if !matches!(kernel, 3 | 5) || !matches!(stride, 1 | 2) {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                detail: format!("unsupported kernel {kernel} / stride {stride}"),
            });
        }
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h,
            out_w,
        })
    }

    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfold a `[c, h, w]` buffer into a `[c·k·k, out_h·out_w]` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_h * g.out_w;
    let k = g.kernel;
    let mut cols = vec![0.0; g.in_c * k * k * p];
    for c in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki, g.pad_top, g.in_h) else { continue };
                    let base = (c * g.in_h + iy) * g.in_w;
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kj, g.pad_left, g.in_w) {
                            dst[oy * g.out_w + ox] = x[base + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` buffer.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_h * g.out_w;
    let k = g.kernel;
    let mut x = vec![0.0; g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki, g.pad_top, g.in_h) else { continue };
                    let base = (c * g.in_h + iy) * g.in_w;
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kj, g.pad_left, g.in_w) {
                            x[base + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_sizes() {
        let g = ConvGeom::same(1, 32, 32, 1, 5, 2).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (16, 16, 1, 1));
        let g = ConvGeom::same(1, 7, 7, 1, 3, 1).unwrap();
        assert_eq!((g.out_h, g.pad_top), (7, 1));
        assert!(ConvGeom::same(1, 8, 8, 1, 4, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::same(2, 5, 6, 1, 3, 2).unwrap();
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, &g);
        let c: Vec<f64> = (0..cols.len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
