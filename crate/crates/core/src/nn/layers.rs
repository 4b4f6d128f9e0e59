//! Layers with explicit forward and backward passes.
//!
//! Forward passes borrow the layer immutably and return whatever the backward
//! pass needs; backward passes accumulate into the parameters' gradients and
//! return the gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on the number of elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub value: Vec<T>,
    #[serde(skip, default = "Vec::new")]
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), T::zero());
    }
}

fn he_normal<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::of(normal.sample(rng))).collect()
}

/// Square-kernel, stride-1 convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub pad: usize,
    /// `[cout, cin, kernel, kernel]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            cin,
            cout,
            kernel,
            pad,
            weight: Param::new(he_normal(rng, fan_in, cout * fan_in)),
            bias: Param::new(vec![T::zero(); cout]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::Shape(format!(
                "{h}x{w} input is too small for a {k}x{k} convolution with padding {p}",
                k = self.kernel,
                p = self.pad
            )));
        }
        Ok((hp - self.kernel + 1, wp - self.kernel + 1))
    }

    fn rows_per_tile(&self, wo: usize) -> usize {
        let ckk = self.cin * self.kernel * self.kernel;
        (COLS_BUDGET / (ckk * wo).max(1)).max(1)
    }

    /// Unfolds output rows `r0..r1` of one sample into a `[cin*k*k, (r1-r0)*wo]` matrix.
    fn im2col(&self, x: &[T], h: usize, w: usize, wo: usize, r0: usize, r1: usize, cols: &mut Vec<T>) {
        let k = self.kernel;
        let len = (r1 - r0) * wo;
        cols.clear();
        cols.resize(self.cin * k * k * len, T::zero());
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * len..(row + 1) * len];
                    for r in r0..r1 {
                        let src_r = r as isize + ki as isize - self.pad as isize;
                        if src_r < 0 || src_r >= h as isize {
                            continue;
                        }
                        let src = &plane[src_r as usize * w..(src_r as usize + 1) * w];
                        let out = &mut dst[(r - r0) * wo..(r - r0 + 1) * wo];
                        let shift = kj as isize - self.pad as isize;
                        let c_lo = (-shift).max(0) as usize;
                        let c_hi = ((w as isize - shift).min(wo as isize)).max(0) as usize;
                        if c_lo < c_hi {
                            let s0 = (c_lo as isize + shift) as usize;
                            out[c_lo..c_hi].copy_from_slice(&src[s0..s0 + (c_hi - c_lo)]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, wo: usize, r0: usize, r1: usize, dx: &mut [T]) {
        let k = self.kernel;
        let len = (r1 - r0) * wo;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * len..(row + 1) * len];
                    for r in r0..r1 {
                        let dst_r = r as isize + ki as isize - self.pad as isize;
                        if dst_r < 0 || dst_r >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[dst_r as usize * w..(dst_r as usize + 1) * w];
                        let inp = &src[(r - r0) * wo..(r - r0 + 1) * wo];
                        let shift = kj as isize - self.pad as isize;
                        let c_lo = (-shift).max(0) as usize;
                        let c_hi = ((w as isize - shift).min(wo as isize)).max(0) as usize;
                        for c in c_lo..c_hi {
                            let d = &mut dst[(c as isize + shift) as usize];
                            *d = *d + inp[c];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.cin {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.cin,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let (ho, wo) = self.output_size(h, w)?;
        let ckk = self.cin * self.kernel * self.kernel;
        let mut y = Tensor::zeros(x.batch(), self.cout, ho, wo);
        let tile = self.rows_per_tile(wo);
        let mut cols = Vec::new();
        for i in 0..x.batch() {
            let xs = x.sample(i);
            let ys = y.sample_mut(i);
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + tile).min(ho);
                let len = (r1 - r0) * wo;
                self.im2col(xs, h, w, wo, r0, r1, &mut cols);
                T::gemm(
                    self.cout, ckk, len, T::one(),
                    &self.weight.value, ckk, 1,
                    &cols, len, 1,
                    T::zero(), &mut ys[r0 * wo..], ho * wo, 1,
                );
                r0 = r1;
            }
            for co in 0..self.cout {
                let b = self.bias.value[co];
                ys[co * ho * wo..(co + 1) * ho * wo].iter_mut().for_each(|v| *v = *v + b);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.height(), x.width());
        let (ho, wo) = (dy.height(), dy.width());
        let ckk = self.cin * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.batch(), self.cin, h, w);
        let tile = self.rows_per_tile(wo);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for i in 0..x.batch() {
            let xs = x.sample(i);
            let dys = dy.sample(i);
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + tile).min(ho);
                let len = (r1 - r0) * wo;
                self.im2col(xs, h, w, wo, r0, r1, &mut cols);
                let dy_tile = &dys[r0 * wo..];
                // dW += dY * cols^T
                T::gemm(
                    self.cout, len, ckk, T::one(),
                    dy_tile, ho * wo, 1,
                    &cols, 1, len,
                    T::one(), &mut self.weight.grad, ckk, 1,
                );
                // dcols = W^T * dY
                dcols.clear();
                dcols.resize(ckk * len, T::zero());
                T::gemm(
                    ckk, self.cout, len, T::one(),
                    &self.weight.value, 1, ckk,
                    dy_tile, ho * wo, 1,
                    T::zero(), &mut dcols, len, 1,
                );
                self.col2im(&dcols, h, w, wo, r0, r1, dx.sample_mut(i));
                r0 = r1;
            }
            for co in 0..self.cout {
                let s: T = dys[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
                self.bias.grad[co] = self.bias.grad[co] + s;
            }
        }
        dx
    }
}

/// 2x2 transposed convolution with stride 2: doubles both spatial dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2x2<T> {
    pub cin: usize,
    pub cout: usize,
    /// `[cin, cout, 2, 2]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            cin,
            cout,
            weight: Param::new(he_normal(rng, cin, cin * cout * 4)),
            bias: Param::new(vec![T::zero(); cout]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.cin {
            return Err(Error::Shape(format!(
                "transposed convolution expects {} channels, got {}",
                self.cin,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let m = self.cout * 4;
        let mut y = Tensor::zeros(x.batch(), self.cout, 2 * h, 2 * w);
        let mut buf = vec![T::zero(); m * hw];
        for i in 0..x.batch() {
            T::gemm(
                m, self.cin, hw, T::one(),
                &self.weight.value, 1, m,
                x.sample(i), hw, 1,
                T::zero(), &mut buf, hw, 1,
            );
            let ys = y.sample_mut(i);
            for co in 0..self.cout {
                let b = self.bias.value[co];
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &buf[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for r in 0..h {
                            let out = &mut ys[(co * 2 * h + 2 * r + a) * 2 * w..][..2 * w];
                            for c in 0..w {
                                out[2 * c + bb] = row[r * w + c] + b;
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let m = self.cout * 4;
        let mut dx = Tensor::zeros(x.batch(), self.cin, h, w);
        let mut buf = vec![T::zero(); m * hw];
        for i in 0..x.batch() {
            let dys = dy.sample(i);
            for co in 0..self.cout {
                let mut bsum = T::zero();
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &mut buf[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for r in 0..h {
                            let src = &dys[(co * 2 * h + 2 * r + a) * 2 * w..][..2 * w];
                            for c in 0..w {
                                row[r * w + c] = src[2 * c + bb];
                                bsum = bsum + src[2 * c + bb];
                            }
                        }
                    }
                }
                self.bias.grad[co] = self.bias.grad[co] + bsum;
            }
            // dW += X * buf^T
            T::gemm(
                self.cin, hw, m, T::one(),
                x.sample(i), hw, 1,
                &buf, 1, hw,
                T::one(), &mut self.weight.grad, m, 1,
            );
            // dX = W * buf
            T::gemm(
                self.cin, m, hw, T::one(),
                &self.weight.value, m, 1,
                &buf, hw, 1,
                T::zero(), dx.sample_mut(i), hw, 1,
            );
        }
        dx
    }
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with the batch's own statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BatchNormCache<T>) {
        let plane = x.plane();
        let count = x.batch() * plane;
        let inv_count = T::of(1.0 / count as f64);
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = vec![T::zero(); self.channels];
        let momentum = T::of(self.momentum);
        for ch in 0..self.channels {
            let mut mean = T::zero();
            for i in 0..x.batch() {
                mean = mean + x.sample(i)[ch * plane..(ch + 1) * plane].iter().copied().sum();
            }
            mean = mean * inv_count;
            let mut var = T::zero();
            for i in 0..x.batch() {
                for &v in &x.sample(i)[ch * plane..(ch + 1) * plane] {
                    var = var + (v - mean) * (v - mean);
                }
            }
            var = var * inv_count;
            let is = T::one() / (var + T::of(self.eps)).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..x.batch() {
                let xs = &mut xhat.sample_mut(i)[ch * plane..(ch + 1) * plane];
                xs.iter_mut().for_each(|v| *v = (*v - mean) * is);
                let src = &xhat.sample(i)[ch * plane..(ch + 1) * plane].to_vec();
                let ys = &mut y.sample_mut(i)[ch * plane..(ch + 1) * plane];
                for (o, &v) in ys.iter_mut().zip(src) {
                    *o = g * v + b;
                }
            }
            let unbiased = if count > 1 {
                var * T::of(count as f64 / (count - 1) as f64)
            } else {
                var
            };
            self.running_mean[ch] = (T::one() - momentum) * self.running_mean[ch] + momentum * mean;
            self.running_var[ch] = (T::one() - momentum) * self.running_var[ch] + momentum * unbiased;
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let plane = x.plane();
        let mut y = x.clone();
        for ch in 0..self.channels {
            let is = T::one() / (self.running_var[ch] + T::of(self.eps)).sqrt();
            let scale = self.gamma.value[ch] * is;
            let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
            for i in 0..x.batch() {
                y.sample_mut(i)[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let plane = dy.plane();
        let count = T::of((dy.batch() * plane) as f64);
        let mut dx = dy.clone();
        for ch in 0..self.channels {
            let (mut dgamma, mut dbeta) = (T::zero(), T::zero());
            for i in 0..dy.batch() {
                let d = &dy.sample(i)[ch * plane..(ch + 1) * plane];
                let xh = &cache.xhat.sample(i)[ch * plane..(ch + 1) * plane];
                for (&a, &b) in d.iter().zip(xh) {
                    dgamma = dgamma + a * b;
                    dbeta = dbeta + a;
                }
            }
            self.gamma.grad[ch] = self.gamma.grad[ch] + dgamma;
            self.beta.grad[ch] = self.beta.grad[ch] + dbeta;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for i in 0..dy.batch() {
                let xh = cache.xhat.sample(i)[ch * plane..(ch + 1) * plane].to_vec();
                let out = &mut dx.sample_mut(i)[ch * plane..(ch + 1) * plane];
                for (o, xv) in out.iter_mut().zip(xh) {
                    *o = k * (count * *o - dbeta - xv * dgamma);
                }
            }
        }
        dx
    }
}

pub fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `dy` wherever the rectified output `y` was not positive.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (h, w) = (x.height(), x.width());
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(x.batch(), x.channels(), ho, wo);
    let mut arg = Vec::with_capacity(y.data().len());
    for i in 0..x.batch() {
        let xs = x.sample(i);
        let ys = y.sample_mut(i);
        for ch in 0..x.channels() {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            for r in 0..ho {
                for c in 0..wo {
                    let mut best = (2 * r) * w + 2 * c;
                    for idx in [(2 * r) * w + 2 * c + 1, (2 * r + 1) * w + 2 * c, (2 * r + 1) * w + 2 * c + 1] {
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    ys[(ch * ho + r) * wo + c] = plane[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<T: Scalar>(input_shape: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    let plane_out = dy.plane();
    for i in 0..n {
        let dys = dy.sample(i);
        let dxs = dx.sample_mut(i);
        for ch in 0..c {
            for p in 0..plane_out {
                let k = (i * c + ch) * plane_out + p;
                let d = &mut dxs[ch * h * w + arg[k] as usize];
                *d = *d + dys[ch * plane_out + p];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (ho, wo) = conv.output_size(x.height(), x.width()).unwrap();
        let k = conv.kernel;
        let mut y = Tensor::zeros(x.batch(), conv.cout, ho, wo);
        for i in 0..x.batch() {
            for co in 0..conv.cout {
                for r in 0..ho {
                    for c in 0..wo {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..conv.cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let rr = r as isize + ki as isize - conv.pad as isize;
                                    let cc = c as isize + kj as isize - conv.pad as isize;
                                    if rr >= 0 && cc >= 0 && (rr as usize) < x.height() && (cc as usize) < x.width() {
                                        let xv = x.sample(i)[(ci * x.height() + rr as usize) * x.width() + cc as usize];
                                        acc += conv.weight.value[((co * conv.cin + ci) * k + ki) * k + kj] * xv;
                                    }
                                }
                            }
                        }
                        y.sample_mut(i)[(co * ho + r) * wo + c] = acc;
                    }
                }
            }
        }
        y
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_padded_and_unpadded() {
        for pad in [0, 1] {
            let mut conv = Conv2d::<f64>::new(3, 4, 3, pad, &mut rng());
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(2, 3, 7, 6, 5);
            let y = conv.forward(&x).unwrap();
            let y_ref = naive_conv(&conv, &x);
            assert_eq!(y.shape(), y_ref.shape());
            for (a, b) in y.data().iter().zip(y_ref.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 1, &mut rng());
        let x = random_tensor(2, 2, 5, 4, 1);
        let probe = random_tensor(2, 3, 5, 4, 2);
        conv.weight.zero_grad();
        conv.bias.zero_grad();
        let dx = conv.backward(&x, &probe);
        let h = 1e-6;
        // input gradient
        for idx in [0, 7, 19, 33] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (dot(&conv.forward(&xp).unwrap(), &probe) - dot(&conv.forward(&xm).unwrap(), &probe)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7, "dx[{idx}]: {fd} vs {}", dx.data()[idx]);
        }
        // weight gradient
        for idx in [0, 5, 17, 53] {
            let mut c2 = conv.clone();
            c2.weight.value[idx] += h;
            let plus = dot(&c2.forward(&x).unwrap(), &probe);
            c2.weight.value[idx] -= 2.0 * h;
            let minus = dot(&c2.forward(&x).unwrap(), &probe);
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - conv.weight.grad[idx]).abs() < 1e-7);
        }
        let bias_fd: f64 = probe.data()[..20].iter().chain(&probe.data()[60..80]).sum();
        assert!((conv.bias.grad[0] - bias_fd).abs() < 1e-12);
    }

    #[test]
    fn transpose_conv_backward_matches_finite_differences() {
        let mut up = ConvTranspose2x2::<f64>::new(3, 2, &mut rng());
        up.bias.value = vec![0.5, -0.5];
        let x = random_tensor(2, 3, 3, 2, 3);
        let y = up.forward(&x).unwrap();
        assert_eq!(y.shape(), [2, 2, 6, 4]);
        let probe = random_tensor(2, 2, 6, 4, 4);
        let dx = up.backward(&x, &probe);
        let h = 1e-6;
        for idx in [0, 4, 11, 35] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (dot(&up.forward(&xp).unwrap(), &probe) - dot(&up.forward(&xm).unwrap(), &probe)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7);
        }
        for idx in [0, 9, 23] {
            let mut u2 = up.clone();
            u2.weight.value[idx] += h;
            let plus = dot(&u2.forward(&x).unwrap(), &probe);
            u2.weight.value[idx] -= 2.0 * h;
            let minus = dot(&u2.forward(&x).unwrap(), &probe);
            assert!(((plus - minus) / (2.0 * h) - up.weight.grad[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.3];
        let x = random_tensor(3, 2, 2, 2, 9);
        let probe = random_tensor(3, 2, 2, 2, 10);
        let (_, cache) = bn.clone().forward_train(&x);
        let dx = bn.backward(&cache, &probe);
        let h = 1e-6;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fp = dot(&bn.clone().forward_train(&xp).0, &probe);
            let fm = dot(&bn.clone().forward_train(&xm).0, &probe);
            assert!(((fp - fm) / (2.0 * h) - dx.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - 1e-5];
        let x = Tensor::from_vec(1, 1, 1, 2, vec![2.0, 4.0]).unwrap();
        let y = bn.forward_eval(&x);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 3, 4, vec![1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.shape(), [1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dy = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]).unwrap();
        let dx = max_pool2_backward(x.shape(), &arg, &dy);
        assert_eq!(dx.data()[1], 1.0);
        assert_eq!(dx.data()[6], 2.0);
        assert_eq!(dx.data().iter().sum::<f64>(), 3.0);
    }
}
