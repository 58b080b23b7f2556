//! im2col / col2im for square-kernel convolutions on `(C, H, W)` images.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input offset of tap `(ky, kx)` for output pixel `(oy, ox)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// `(C*k*k) x (out_h*out_w)` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let pixels = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch_len() * pixels];
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.out_w + ox] = plane[y * g.in_w + xx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the image gradient.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let pixels = g.out_pixels();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.in_w + xx] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
