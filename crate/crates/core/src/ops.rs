//! Convolution kernels built on im2col and a packed GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Static shape of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride, padding }
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// `c[m×n] = alpha * op(a) * op(b) + beta * c`, row-major, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and strides describe
    // row-major (or transposed row-major) layouts inside those bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one C×H×W image into a (C·k·k)×(OH·OW) column matrix.
fn im2col(image: &[f32], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, col: &mut [f32]) {
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let src = &image[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto an image, accumulating overlaps.
fn col2im(col: &[f32], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, image: &mut [f32]) {
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let dst = &mut image[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_input(input: &Tensor, g: &ConvGeometry) -> Result<(usize, usize)> {
    if input.channels() != g.in_channels {
        bail!(Shape, "convolution expects {} input channels, got {}", g.in_channels, input.channels());
    }
    if input.height() + 2 * g.padding < g.kernel || input.width() + 2 * g.padding < g.kernel {
        bail!(Shape, "input {:?} smaller than kernel {}", input.shape(), g.kernel);
    }
    Ok((g.output_size(input.height()), g.output_size(input.width())))
}

pub fn conv2d_forward(input: &Tensor, weight: &[f32], bias: Option<&[f32]>, g: &ConvGeometry) -> Result<Tensor> {
    let (oh, ow) = check_input(input, g)?;
    let (n, h, w) = (input.batch(), input.height(), input.width());
    let plane = oh * ow;
    let mut out = Tensor::zeros([n, g.out_channels, oh, ow]);
    let pointwise = g.kernel == 1 && g.stride == 1 && g.padding == 0;
    let mut col = if pointwise { Vec::new() } else { vec![0.0; g.patch_len() * plane] };
    for i in 0..n {
        let cols: &[f32] = if pointwise {
            input.item(i)
        } else {
            im2col(input.item(i), h, w, g, oh, ow, &mut col);
            &col
        };
        let dst = out.item_mut(i);
        gemm(g.out_channels, g.patch_len(), plane, 1.0, weight, false, cols, false, 0.0, dst);
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v += b[oc];
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates weight (and bias) gradients and returns the input gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &[f32],
    g: &ConvGeometry,
    grad_out: &Tensor,
    grad_weight: &mut [f32],
    grad_bias: Option<&mut [f32]>,
) -> Result<Tensor> {
    let (oh, ow) = check_input(input, g)?;
    if grad_out.shape() != [input.batch(), g.out_channels, oh, ow] {
        bail!(Shape, "gradient {:?} does not match convolution output", grad_out.shape());
    }
    let (n, h, w) = (input.batch(), input.height(), input.width());
    let plane = oh * ow;
    let patch = g.patch_len();
    let mut grad_in = Tensor::zeros(input.shape());
    let pointwise = g.kernel == 1 && g.stride == 1 && g.padding == 0;
    let mut col = vec![0.0; patch * plane];
    let mut dcol = vec![0.0; patch * plane];
    for i in 0..n {
        let go = grad_out.item(i);
        if pointwise {
            gemm(g.out_channels, plane, patch, 1.0, go, false, input.item(i), true, 1.0, grad_weight);
            gemm(patch, g.out_channels, plane, 1.0, weight, true, go, false, 0.0, grad_in.item_mut(i));
        } else {
            im2col(input.item(i), h, w, g, oh, ow, &mut col);
            gemm(g.out_channels, plane, patch, 1.0, go, false, &col, true, 1.0, grad_weight);
            gemm(patch, g.out_channels, plane, 1.0, weight, true, go, false, 0.0, &mut dcol);
            col2im(&dcol, h, w, g, oh, ow, grad_in.item_mut(i));
        }
    }
    if let Some(gb) = grad_bias {
        for i in 0..n {
            for (oc, chunk) in grad_out.item(i).chunks(plane).enumerate() {
                gb[oc] += chunk.iter().sum::<f32>();
            }
        }
    }
    Ok(grad_in)
}
