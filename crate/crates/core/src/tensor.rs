//! Dense row-major `f64` tensors and the numeric kernels the network needs.
//!
//! Feature maps are `[channels, height, width]`; convolution weights are
//! `[out, in, kh, kw]`. Everything runs on a single sample (batch size 1),
//! batches are formed by gradient accumulation in the trainer.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [c, h, w] tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.dims3();
        (h, w)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x] = value;
    }

    /// One channel plane of a `[c, h, w]` tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.dims3();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let (_, h, w) = self.dims3();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Mirror along the last (width) axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = *self.shape.last().expect("flip of a scalar tensor");
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(w).zip(self.data.chunks(w)) {
            for (x, v) in dst.iter_mut().enumerate() {
                *v = src[w - 1 - x];
            }
        }
        out
    }

    /// Concatenate `[c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let (_, h, w) = parts[0].dims3();
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3();
            assert_eq!((ph, pw), (h, w), "concat of mismatched spatial shapes");
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&[channels, h, w], data)
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Self {
        let (in_c, in_h, in_w) = (x_shape[0], x_shape[1], x_shape[2]);
        assert_eq!(w_shape[1], in_c, "conv weight expects {} channels, got {in_c}", w_shape[1]);
        let k = w_shape[2];
        Self {
            in_c,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h: conv_out_len(in_h, k, stride, pad),
            out_w: conv_out_len(in_w, k, stride, pad),
        }
    }

    fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(row, col, input_index)` for every in-bounds im2col entry.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            f(row, oy * self.out_w + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let n = g.cols();
    let mut cols = vec![0.0; g.rows() * n];
    let src = x.data();
    g.for_each_tap(|row, col, idx| cols[row * n + col] = src[idx]);
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Tensor {
    let n = g.cols();
    let mut out = Tensor::zeros(&[g.in_c, g.in_h, g.in_w]);
    let dst = out.data_mut();
    g.for_each_tap(|row, col, idx| dst[idx] += cols[row * n + col]);
    out
}

/// `c = a[m,k] * b[k,n] (+ c if accumulate)`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n row-major
    // (or transposed) buffers whose lengths are asserted here.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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

/// Square-kernel 2-D convolution. Returns the output and the im2col buffer
/// (reused by the backward pass).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> (Tensor, Vec<f64>) {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad);
    let out_c = weight.shape()[0];
    let n = g.cols();
    let cols = im2col(x, &g);
    let mut out = Tensor::zeros(&[out_c, g.out_h, g.out_w]);
    for (o, plane) in out.data_mut().chunks_mut(n).enumerate() {
        plane.fill(bias.data()[o]);
    }
    gemm(out_c, g.rows(), n, weight.data(), false, &cols, false, out.data_mut(), true);
    (out, cols)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    x_shape: &[usize],
    weight: &Tensor,
    cols: &[f64],
    stride: usize,
    pad: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let g = ConvGeometry::new(x_shape, weight.shape(), stride, pad);
    let out_c = weight.shape()[0];
    let n = g.cols();
    let rows = g.rows();
    let (weight_grad, bias_grad) = if need_params {
        let mut dw = Tensor::zeros(weight.shape());
        gemm(out_c, n, rows, grad_out.data(), false, cols, true, dw.data_mut(), false);
        let db: Vec<f64> = grad_out.data().chunks(n).map(|p| p.iter().sum()).collect();
        (Some(dw), Some(Tensor::from_vec(&[out_c], db)))
    } else {
        (None, None)
    };
    let input_grad = need_input.then(|| {
        let mut dcols = vec![0.0; rows * n];
        gemm(rows, out_c, n, weight.data(), true, grad_out.data(), false, &mut dcols, false);
        col2im(&dcols, &g)
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Linear interpolation taps `(i0, i1, w0, w1)` for resizing one axis with
/// half-pixel centers (`align_corners = false`).
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize of every channel to `out_h × out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x.dims3();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, out_h, out_w) = grad_out.dims3();
    if (in_h, in_w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let mut out = Tensor::zeros(&[c, in_h, in_w]);
    for ch in 0..c {
        let src = grad_out.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                dst[y0 * in_w + x0] += wy0 * wx0 * g;
                dst[y0 * in_w + x1] += wy0 * wx1 * g;
                dst[y1 * in_w + x0] += wy1 * wx0 * g;
                dst[y1 * in_w + x1] += wy1 * wx1 * g;
            }
        }
    }
    out
}

/// Sample a single-channel plane at a real-valued position with bilinear
/// interpolation. Returns `None` outside `[0, w-1] × [0, h-1]`.
pub fn sample_bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> Option<f64> {
    const EPS: f64 = 1e-9;
    if !(x >= -EPS && y >= -EPS && x <= (w - 1) as f64 + EPS && y <= (h - 1) as f64 + EPS) {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.dims3();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = conv_out_len(h, k, stride, pad);
        let ow = conv_out_len(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                    * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(oc, oy, ox, acc);
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + seed) * 0.7311).sin()).collect())
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
            let x = ramp(&[3, 7, 6], 0.3);
            let w = ramp(&[4, 3, k, k], 1.1);
            let b = ramp(&[4], 2.0);
            let (fast, _) = conv2d(&x, &w, &b, stride, pad);
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // With zero bias, y is linear in x and in w separately: <y, g> = <dx, x> = <dw, w>.
        let x = ramp(&[2, 5, 5], 0.1);
        let w = ramp(&[3, 2, 3, 3], 0.9);
        let zero_b = Tensor::zeros(&[3]);
        let (y, cols) = conv2d(&x, &w, &zero_b, 2, 1);
        let g = ramp(y.shape(), 4.2);
        let grads = conv2d_backward(&g, x.shape(), &w, &cols, 2, 1, true, true);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &g);
        assert!((dot(grads.input.as_ref().unwrap(), &x) - lhs).abs() < 1e-10);
        assert!((dot(grads.weight.as_ref().unwrap(), &w) - lhs).abs() < 1e-10);
        let bias_sum: f64 = grads.bias.unwrap().data().iter().sum();
        assert!((bias_sum - g.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        for &(ih, iw, oh, ow) in &[(4, 4, 8, 8), (8, 8, 2, 2), (3, 5, 6, 10), (16, 16, 4, 4)] {
            let x = ramp(&[2, ih, iw], 0.5);
            let g = ramp(&[2, oh, ow], 3.3);
            let y = resize_bilinear(&x, oh, ow);
            let dx = resize_bilinear_backward(&g, ih, iw);
            let a: f64 = y.data().iter().zip(g.data()).map(|(p, q)| p * q).sum();
            let b: f64 = x.data().iter().zip(dx.data()).map(|(p, q)| p * q).sum();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::full(&[1, 4, 4], 0.25);
        let up = resize_bilinear(&x, 32, 32);
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn flip_is_involution() {
        let x = ramp(&[2, 3, 5], 0.0);
        assert_eq!(x.flip_horizontal().flip_horizontal(), x);
        assert_eq!(x.flip_horizontal().at(1, 2, 0), x.at(1, 2, 4));
    }

    #[test]
    fn bilinear_sample_hits_grid_and_midpoints() {
        let plane = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(sample_bilinear(&plane, 2, 2, 1.0, 1.0), Some(3.0));
        assert_eq!(sample_bilinear(&plane, 2, 2, 0.5, 0.5), Some(1.5));
        assert_eq!(sample_bilinear(&plane, 2, 2, 1.5, 0.0), None);
    }
}
