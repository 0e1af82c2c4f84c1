//! Dense loops shared by the forward and backward rules.
//!
//! All matrices are row-major slices. Every `gemm_*` accumulates into `c`.

use crate::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if aip == T::zero() {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (arow, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&api, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            if api == T::zero() {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of a single-image 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: conv_out_extent(height, kernel, stride, padding)?,
            out_width: conv_out_extent(width, kernel, stride, padding)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds `x[C×H×W]` into columns `[C·k·k × Hout·Wout]`; padded taps are zero.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let positions = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * positions];
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            dst[oy * g.out_width + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlapping taps.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let positions = g.positions();
    let mut x = vec![T::zero(); g.channels * g.height * g.width];
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
