//! Raw NCHW kernels shared by the forward and backward passes.

use matrixmultiply::dgemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold one image `[C, H, W]` into columns `[C*k*k, Ho*Wo]`.
fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * oh * ow;
                let dst = &mut cols[row..row + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlaps.
fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * oh * ow;
                let src = &cols[row..row + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C = A (m x k) * B (k x n)` with explicit strides, accumulating when `beta = 1`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices are sized for the requested strides by every caller;
    // `c` is row-major m x n and not aliased with `a` or `b`.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (patch, pixels) = (g.patch(), g.out_pixels());
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * pixels;
    let mut out = vec![0.0; batch * out_size];
    let mut cols = vec![0.0; patch * pixels];
    for b in 0..batch {
        im2col(g, &input[b * in_size..(b + 1) * in_size], &mut cols);
        let dst = &mut out[b * out_size..(b + 1) * out_size];
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_mut(pixels).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        gemm(
            g.out_channels,
            patch,
            pixels,
            weight,
            (patch as isize, 1),
            &cols,
            (pixels as isize, 1),
            dst,
            if bias.is_some() { 1.0 } else { 0.0 },
        );
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (patch, pixels) = (g.patch(), g.out_pixels());
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * pixels;
    let mut d_weight = vec![0.0; g.out_channels * patch];
    let mut d_bias = vec![0.0; g.out_channels];
    let mut d_input = need_input.then(|| vec![0.0; batch * in_size]);
    let mut cols = vec![0.0; patch * pixels];
    for b in 0..batch {
        let dy = &grad_out[b * out_size..(b + 1) * out_size];
        for (oc, chunk) in dy.chunks(pixels).enumerate() {
            d_bias[oc] += chunk.iter().sum::<f64>();
        }
        im2col(g, &input[b * in_size..(b + 1) * in_size], &mut cols);
        // dW += dY * cols^T
        gemm(
            g.out_channels,
            pixels,
            patch,
            dy,
            (pixels as isize, 1),
            &cols,
            (1, pixels as isize),
            &mut d_weight,
            1.0,
        );
        if let Some(dx) = d_input.as_mut() {
            // dcols = W^T * dY
            gemm(
                patch,
                g.out_channels,
                pixels,
                weight,
                (1, patch as isize),
                dy,
                (pixels as isize, 1),
                &mut cols,
                0.0,
            );
            col2im(g, &cols, &mut dx[b * in_size..(b + 1) * in_size]);
        }
    }
    (d_input, d_weight, d_bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive_conv(g: &ConvGeometry, batch: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; batch * g.out_channels * oh * ow];
        for n in 0..batch {
            for oc in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + ic) * g.in_h + iy as usize) * g.in_w + ix as usize;
                                    let wi = ((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * g.out_channels + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_naive() {
        for &(k, s, h, w) in &[(3, 1, 5, 6), (5, 2, 7, 9), (7, 2, 8, 8), (3, 2, 3, 4)] {
            let g = ConvGeometry { in_channels: 2, out_channels: 3, kernel: k, stride: s, pad: k / 2, in_h: h, in_w: w };
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let b = [0.1, -0.2, 0.3];
            let fast = conv2d_forward(&g, 2, &x, &wt, Some(&b));
            let slow = naive_conv(&g, 2, &x, &wt, &b);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_output_is_ceil_half() {
        for n in 8..20 {
            let g = ConvGeometry { in_channels: 1, out_channels: 1, kernel: 3, stride: 2, pad: 1, in_h: n, in_w: n };
            assert_eq!(g.out_h(), n.div_ceil(2));
            let g = ConvGeometry { kernel: 7, pad: 3, ..g };
            assert_eq!(g.out_w(), n.div_ceil(2));
        }
    }
}
