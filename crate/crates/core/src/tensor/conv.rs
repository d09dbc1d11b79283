//! im2col convolution kernels backed by a blocked matrix multiply.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, out: usize, k: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

/// Unfolds one image `C×H×W` into a `(C·KH·KW) × (OH·OW)` matrix.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let sy = g.source(oy, ky).filter(|&y| y < g.height);
                    for ox in 0..g.out_w {
                        let v = match (sy, g.source(ox, kx).filter(|&x| x < g.width)) {
                            (Some(y), Some(x)) => image[(c * g.height + y) * g.width + x],
                            _ => 0.0,
                        };
                        dst[oy * g.out_w + ox] = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ky).filter(|&y| y < g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.source(ox, kx).filter(|&x| x < g.width) {
                            image[(c * g.height + y) * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a_view = if a_transposed {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let b_view = if b_transposed {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut c_view = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &a_view, &b_view, beta, &mut c_view);
}

pub(crate) fn conv_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], out: &mut [f64], cols: &mut [f64]) {
    let img_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.out_pixels();
    let col_len = g.patch_len() * g.out_pixels();
    for n in 0..g.batch {
        let cols_n = &mut cols[n * col_len..(n + 1) * col_len];
        im2col(g, &input[n * img_len..(n + 1) * img_len], cols_n);
        gemm(
            g.out_channels,
            g.patch_len(),
            g.out_pixels(),
            kernel,
            false,
            cols_n,
            false,
            0.0,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
}

/// Gradients w.r.t. input and kernel; either may be skipped.
pub(crate) fn conv_backward(
    g: &ConvGeometry,
    grad_out: &[f64],
    kernel: &[f64],
    cols: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
) {
    let img_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.out_pixels();
    let col_len = g.patch_len() * g.out_pixels();
    let mut dcols = vec![0.0; col_len];
    for n in 0..g.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            gemm(
                g.out_channels,
                g.out_pixels(),
                g.patch_len(),
                go,
                false,
                &cols[n * col_len..(n + 1) * col_len],
                true,
                1.0,
                gk,
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                g.patch_len(),
                g.out_channels,
                g.out_pixels(),
                kernel,
                true,
                go,
                false,
                0.0,
                &mut dcols,
            );
            col2im(g, &dcols, &mut gi[n * img_len..(n + 1) * img_len]);
        }
    }
}
