//! Numeric kernels behind the differentiable convolution, pooling and
//! interpolation ops. Everything works on flat row-major slices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering every index reachable through the
    // given strides; `c` is contiguous row-major m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Output extent of a strided window, or an error if it is not a positive integer.
pub(crate) fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    let span = input + 2 * padding;
    if span < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} larger than padded input {span}"),
        ));
    }
    if !(span - kernel).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "non-integral output extent: ({input} + 2*{padding} - {kernel}) / {stride} + 1"
            ),
        ));
    }
    Ok((span - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let plane = g.col_cols();
    for c in 0..g.c_in {
        let src = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let plane = g.col_cols();
    for c in 0..g.c_in {
        let dst = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let rows = g.col_rows();
    let plane = g.col_cols();
    let mut cols = vec![0.0; rows * plane];
    let mut out = vec![0.0; g.n * g.c_out * plane];
    for n in 0..g.n {
        let image = &input[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        im2col(g, image, &mut cols);
        let dst = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        gemm(
            g.c_out,
            rows,
            plane,
            kernel,
            (rows as isize, 1),
            &cols,
            (plane as isize, 1),
            0.0,
            dst,
        );
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

/// Accumulates gradients of a convolution into the provided buffers.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let rows = g.col_rows();
    let plane = g.col_cols();
    let image_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; rows * plane];
    let mut dcols = vec![0.0; rows * plane];
    for n in 0..g.n {
        let dy = &grad_out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (o, chunk) in dy.chunks_exact(plane).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dk) = grad_kernel.as_deref_mut() {
            im2col(g, &input[n * image_len..(n + 1) * image_len], &mut cols);
            // dK (c_out×rows) += dY (c_out×plane) · colsᵀ (plane×rows)
            gemm(
                g.c_out,
                plane,
                rows,
                dy,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                1.0,
                dk,
            );
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            // dcols (rows×plane) = Kᵀ (rows×c_out) · dY (c_out×plane)
            gemm(
                rows,
                g.c_out,
                plane,
                kernel,
                (1, rows as isize),
                dy,
                (plane as isize, 1),
                0.0,
                &mut dcols,
            );
            col2im_add(g, &dcols, &mut dx[n * image_len..(n + 1) * image_len]);
        }
    }
}

/// Non-overlapping `size×size` max-pool. Returns values and the flat input
/// index of each window's maximum (first index wins ties).
pub(crate) fn max_pool_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                let mut best_val = input[best];
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if input[idx] > best_val {
                            best_val = input[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_val);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Distance of each pooling window's maximum to its runner-up, skipping
/// exact ties. Used to detect points where finite differences are unreliable.
pub(crate) fn max_pool_margin(input: &[f64], planes: usize, h: usize, w: usize, size: usize) -> f64 {
    let (ho, wo) = (h / size, w / size);
    let mut margin = f64::INFINITY;
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut vals: Vec<f64> = Vec::with_capacity(size * size);
                for dy in 0..size {
                    for dx in 0..size {
                        vals.push(input[base + (oy * size + dy) * w + ox * size + dx]);
                    }
                }
                let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in vals {
                    let gap = top - v;
                    if gap > 0.0 {
                        margin = margin.min(gap);
                    }
                }
            }
        }
    }
    margin
}

/// Source coordinate and blend weight for corner-aligned interpolation.
fn align_corners(out_idx: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len <= 1 || in_len <= 1 {
        return (0, 0, 0.0);
    }
    let src = out_idx as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = (libm::floor(src) as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

pub(crate) fn upsample_bilinear_forward(
    input: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    let xs: Vec<_> = (0..ow).map(|x| align_corners(x, ow, w)).collect();
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = align_corners(y, oh, h);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_backward(
    grad_out: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    grad_in: &mut [f64],
) {
    let xs: Vec<_> = (0..ow).map(|x| align_corners(x, ow, w)).collect();
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = align_corners(y, oh, h);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = src[y * ow + x];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}
