//! Convolution, transposed convolution and pooling kernels on `[N, C, H, W]` tensors.
//!
//! Both convolution flavours are lowered onto one column layout: for an image of
//! `channels x height x width` and a square kernel, `im2col` produces a matrix with
//! `channels * kernel * kernel` rows and `out_h * out_w` columns. A forward
//! convolution multiplies the weights into that matrix; a transposed convolution
//! produces such a matrix and folds it back with `col2im`.

use crate::{Scalar, Tensor};

/// Sliding-window geometry over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution over a `height x width` image.
    pub fn forward(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        assert!(
            height + 2 * pad >= kernel && width + 2 * pad >= kernel,
            "kernel {kernel} larger than padded input {height}x{width} (pad {pad})"
        );
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_output_len(height, kernel, stride, pad),
            out_w: conv_output_len(width, kernel, stride, pad),
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output length of a convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output length of a transposed convolution along one axis.
pub fn conv_transpose_output_len(input: usize, kernel: usize, stride: usize, pad: usize, output_pad: usize) -> usize {
    (input - 1) * stride + kernel + output_pad - 2 * pad
}

pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let ConvGeometry {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h,
        out_w,
    } = *g;
    debug_assert_eq!(img.len(), channels * height * width);
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let ncols = out_h * out_w;
    for c in 0..channels {
        let plane = &img[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * width..(iy as usize + 1) * width];
                    if stride == 1 {
                        // ix = ox + kj - pad, valid for ox in [lo, hi)
                        let lo = pad.saturating_sub(kj).min(out_w);
                        let hi = (width + pad).saturating_sub(kj).min(out_w).max(lo);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kj - pad;
                            line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *out = if ix < 0 || ix >= width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let ConvGeometry {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h,
        out_w,
    } = *g;
    debug_assert_eq!(img.len(), channels * height * width);
    let ncols = out_h * out_w;
    for c in 0..channels {
        let plane = &mut img[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    let line = &src[oy * out_w..(oy + 1) * out_w];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kj).min(out_w);
                        let hi = (width + pad).saturating_sub(kj).min(out_w).max(lo);
                        if hi > lo {
                            let start = lo + kj - pad;
                            for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in line.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < width as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution with zero padding. `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4().expect("conv2d input must be rank 4");
    let (co, wci, k, k2) = w.dims4().expect("conv2d weight must be rank 4");
    assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
    assert_eq!(k, k2, "conv2d expects square kernels");
    let g = ConvGeometry::forward(ci, h, wd, k, stride, pad);
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, co, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); rows * ncols];
    let in_per = ci * h * wd;
    let out_per = co * ncols;
    for s in 0..n {
        let img = &x.data()[s * in_per..(s + 1) * in_per];
        let direct = k == 1 && stride == 1 && pad == 0;
        if !direct {
            im2col(img, &g, &mut cols);
        }
        let col_ref: &[T] = if direct { img } else { &cols };
        let dst = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        T::gemm(co, rows, ncols, T::one(), w.data(), rows as isize, 1, col_ref, ncols as isize, 1, T::zero(), dst, ncols as isize, 1);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(ncols).enumerate() {
                let bias = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is computed only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let g = ConvGeometry::forward(ci, h, wd, k, stride, pad);
    let (rows, ncols) = (g.rows(), g.cols());
    let (want_dx, want_dw, want_db) = want;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = want_db.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); rows * ncols];
    let in_per = ci * h * wd;
    let out_per = co * ncols;
    for s in 0..n {
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[s * in_per..(s + 1) * in_per];
            im2col(img, &g, &mut cols);
            // dW[Co, K] += dY[Co, P] * cols^T[P, K]
            T::gemm(co, ncols, rows, T::one(), dys, ncols as isize, 1, &cols, 1, ncols as isize, T::one(), dw.data_mut(), rows as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[K, P] = W^T[K, Co] * dY[Co, P]
            T::gemm(rows, co, ncols, T::one(), w.data(), 1, rows as isize, dys, ncols as isize, 1, T::zero(), &mut cols, ncols as isize, 1);
            col2im(&cols, &g, &mut dx.data_mut()[s * in_per..(s + 1) * in_per]);
        }
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dys.chunks(ncols).enumerate() {
                db.data_mut()[oc] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution. `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]`, `b: [Co]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4().expect("conv_transpose2d input must be rank 4");
    let (wci, co, k, _) = w.dims4().expect("conv_transpose2d weight must be rank 4");
    assert_eq!(ci, wci, "conv_transpose2d channel mismatch: input {ci}, weight {wci}");
    assert!(output_pad < stride, "output padding must be smaller than stride");
    let oh = conv_transpose_output_len(h, k, stride, pad, output_pad);
    let ow = conv_transpose_output_len(wd, k, stride, pad, output_pad);
    let g = ConvGeometry::forward(co, oh, ow, k, stride, pad);
    debug_assert_eq!((g.out_h, g.out_w), (h, wd));
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut cols = vec![T::zero(); rows * ncols];
    let in_per = ci * h * wd;
    let out_per = co * oh * ow;
    for s in 0..n {
        let img = &x.data()[s * in_per..(s + 1) * in_per];
        // cols[Co*k*k, P] = W^T[Co*k*k, Ci] * X[Ci, P]
        T::gemm(rows, ci, ncols, T::one(), w.data(), 1, rows as isize, img, ncols as isize, 1, T::zero(), &mut cols, ncols as isize, 1);
        let dst = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        col2im(&cols, &g, dst);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                let bias = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (_, co, k, _) = w.dims4().unwrap();
    let (_, _, oh, ow) = dy.dims4().unwrap();
    let g = ConvGeometry::forward(co, oh, ow, k, stride, pad);
    let (rows, ncols) = (g.rows(), g.cols());
    debug_assert_eq!(ncols, h * wd);
    let (want_dx, want_dw, want_db) = want;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = want_db.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); rows * ncols];
    let in_per = ci * h * wd;
    let out_per = co * oh * ow;
    for s in 0..n {
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        if want_dx || want_dw {
            im2col(dys, &g, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            // dX[Ci, P] = W[Ci, Co*k*k] * dcols[Co*k*k, P]
            let dst = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
            T::gemm(ci, rows, ncols, T::one(), w.data(), rows as isize, 1, &cols, ncols as isize, 1, T::zero(), dst, ncols as isize, 1);
        }
        if let Some(dw) = dw.as_mut() {
            // dW[Ci, Co*k*k] += X[Ci, P] * dcols^T[P, Co*k*k]
            let img = &x.data()[s * in_per..(s + 1) * in_per];
            T::gemm(ci, ncols, rows, T::one(), img, ncols as isize, 1, &cols, 1, ncols as isize, T::one(), dw.data_mut(), rows as isize, 1);
        }
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dys.chunks(oh * ow).enumerate() {
                db.data_mut()[oc] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output, the
/// flat index of the selected input element (first maximum wins on ties).
pub fn max_pool2x2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4().expect("max_pool input must be rank 4");
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2x2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                dst[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let oh = conv_output_len(h, k, stride, pad);
        let ow = conv_output_len(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for s in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 1.0).collect()).unwrap()
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (2, 0, 3), (1, 0, 1)] {
            let x = ramp(&[2, 3, 7, 6], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let got = conv2d_forward(&x, &w, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with shared weights.
        let x = ramp(&[1, 2, 8, 8], 0.1);
        let w = ramp(&[3, 2, 3, 3], 0.07);
        let y = conv2d_forward(&x, &w, None, 2, 1);
        let probe = ramp(y.shape(), 0.03);
        // conv weight [Co, Ci, k, k] reads as transposed weight [Ci', Co'] with Ci' = Co.
        let back = conv_transpose2d_forward(&probe, &w, None, 2, 1, 1);
        assert_eq!(back.shape(), x.shape());
        let lhs: f64 = y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        assert_eq!(conv_transpose_output_len(16, 3, 2, 1, 1), 32);
        let x = ramp(&[1, 4, 5, 5], 0.1);
        let w = ramp(&[4, 2, 3, 3], 0.1);
        assert_eq!(conv_transpose2d_forward(&x, &w, None, 2, 1, 1).shape(), &[1, 2, 10, 10]);
    }

    #[test]
    fn max_pool_picks_block_maximum() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]).unwrap();
        let (y, arg) = max_pool2x2_forward(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
