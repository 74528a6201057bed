//! Layer implementations with hand-written backward passes.
//!
//! `forward_train` caches what `backward` needs and uses batch statistics;
//! `infer` is read-only and uses moving statistics. Parameter gradients
//! accumulate until the caller zeroes them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};

/// BN moving-average momentum: `moving ← m·moving + (1 − m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-3;

/// A trainable tensor and its gradient.
pub struct Param<'a, T> {
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
    /// Whether L2 regularization applies (conv and dense weights only).
    pub decay: bool,
}

pub trait Layer<T: Scalar>: Send + Sync {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T>;

    fn infer(&self, x: &Tensor<T>) -> Tensor<T>;

    /// Back-propagates `dy`; returns the input gradient when `need_dx`.
    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>>;

    /// Per-sample output shape `[c, h, w]` for a per-sample input shape.
    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], String>;

    fn visit_params(&mut self, _f: &mut dyn FnMut(Param<'_, T>)) {}

    /// Non-trainable state that must survive a save/load (BN moving stats).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut [T])) {}

    /// Holds any random masks fixed across forward passes.
    fn freeze_random(&mut self, _freeze: bool) {}

    fn kind(&self) -> &'static str;
}

fn he_normal<T: Scalar>(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..len)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect()
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_ch, in_ch·k·k]`
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    grad_w: Vec<T>,
    grad_b: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: he_normal(out_ch * fan_in, fan_in, rng),
            bias: bias.then(|| vec![T::zero(); out_ch]),
            grad_w: vec![T::zero(); out_ch * fan_in],
            grad_b: vec![T::zero(); if bias { out_ch } else { 0 }],
            input: None,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride, self.pad).expect("validated shape"),
            conv_out(w, self.kernel, self.stride, self.pad).expect("validated shape"),
        )
    }

    /// Unfolds one sample into `[in_ch·k·k, ho·wo]` columns.
    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
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

    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<T>) -> Tensor<T> {
        let [b, c, h, w] = x.shape;
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let p = ho * wo;
        let kk = self.patch_len();
        let mut out = Tensor::zeros([b, self.out_ch, ho, wo]);
        let mut cols = vec![T::zero(); kk * p];
        for i in 0..b {
            self.im2col(x.sample(i), h, w, ho, wo, &mut cols);
            let y = out.sample_mut(i);
            T::gemm(
                self.out_ch,
                kk,
                p,
                T::one(),
                &self.weight,
                (kk as isize, 1),
                &cols,
                (p as isize, 1),
                T::zero(),
                y,
                (p as isize, 1),
            );
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.iter().enumerate() {
                    y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.run(x);
        self.input = Some(x.clone());
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x)
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("backward without forward_train");
        let [b, _, h, w] = x.shape;
        let (ho, wo) = self.out_hw(h, w);
        let p = ho * wo;
        let kk = self.patch_len();
        let mut cols = vec![T::zero(); kk * p];
        let mut dcols = vec![T::zero(); if need_dx { kk * p } else { 0 }];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
        for i in 0..b {
            let g = dy.sample(i);
            self.im2col(x.sample(i), h, w, ho, wo, &mut cols);
            // dW += dY · colsᵀ
            T::gemm(
                self.out_ch,
                p,
                kk,
                T::one(),
                g,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                &mut self.grad_w,
                (kk as isize, 1),
            );
            if self.bias.is_some() {
                for o in 0..self.out_ch {
                    self.grad_b[o] += g[o * p..(o + 1) * p].iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · dY
                T::gemm(
                    kk,
                    self.out_ch,
                    p,
                    T::one(),
                    &self.weight,
                    (1, kk as isize),
                    g,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                self.col2im(&dcols, h, w, ho, wo, dx.sample_mut(i));
            }
        }
        dx
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3], String> {
        if c != self.in_ch {
            return Err(format!("conv expects {} channels, got {c}", self.in_ch));
        }
        match (
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        ) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok([self.out_ch, ho, wo]),
            _ => Err(format!("conv kernel {} does not fit {h}x{w}", self.kernel)),
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(Param<'_, T>)) {
        f(Param {
            value: &mut self.weight,
            grad: &mut self.grad_w,
            decay: true,
        });
        if let Some(bias) = self.bias.as_mut() {
            f(Param {
                value: bias,
                grad: &mut self.grad_b,
                decay: false,
            });
        }
    }

    fn kind(&self) -> &'static str {
        "conv"
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub moving_mean: Vec<T>,
    pub moving_var: Vec<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 4],
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            moving_mean: vec![T::zero(); channels],
            moving_var: vec![T::one(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: [0; 4],
        }
    }

    /// Per-channel mean and biased variance over batch and spatial axes.
    pub fn batch_stats(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
        let [b, c, h, w] = x.shape;
        let hw = h * w;
        let count = T::from_usize(b * hw).expect("count");
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..b {
                s += x.sample(i)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for i in 0..b {
                for &val in &x.sample(i)[ch * hw..(ch + 1) * hw] {
                    v += (val - m) * (val - m);
                }
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Vec<T>) {
        let [b, c, h, w] = x.shape;
        let hw = h * w;
        let mut y = Tensor::zeros(x.shape);
        let mut xhat = vec![T::zero(); x.data.len()];
        for i in 0..b {
            let base = i * c * hw;
            for ch in 0..c {
                let range = base + ch * hw..base + (ch + 1) * hw;
                for j in range {
                    let xh = (x.data[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    y.data[j] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
        }
        (y, xhat)
    }

    fn eps() -> T {
        T::from_f64_lossy(BN_EPSILON)
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (mean, var) = Self::batch_stats(x);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + Self::eps()).sqrt()).collect();
        let (y, xhat) = self.normalize(x, &mean, &inv_std);
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for ch in 0..self.channels {
            self.moving_mean[ch] = m * self.moving_mean[ch] + (T::one() - m) * mean[ch];
            self.moving_var[ch] = m * self.moving_var[ch] + (T::one() - m) * var[ch];
        }
        self.xhat = xhat;
        self.inv_std = inv_std;
        self.shape = x.shape;
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let inv_std: Vec<T> = self
            .moving_var
            .iter()
            .map(|&v| T::one() / (v + Self::eps()).sqrt())
            .collect();
        self.normalize(x, &self.moving_mean, &inv_std).0
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let [b, c, h, w] = self.shape;
        let hw = h * w;
        let count = T::from_usize(b * hw).expect("count");
        let mut dx = need_dx.then(|| Tensor::zeros(self.shape));
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..b {
                let base = i * c * hw + ch * hw;
                for j in base..base + hw {
                    sum_dy += dy.data[j];
                    sum_dy_xhat += dy.data[j] * self.xhat[j];
                }
            }
            self.grad_gamma[ch] += sum_dy_xhat;
            self.grad_beta[ch] += sum_dy;
            if let Some(dx) = dx.as_mut() {
                let scale = self.gamma[ch] * self.inv_std[ch] / count;
                for i in 0..b {
                    let base = i * c * hw + ch * hw;
                    for j in base..base + hw {
                        dx.data[j] =
                            scale * (count * dy.data[j] - sum_dy - self.xhat[j] * sum_dy_xhat);
                    }
                }
            }
        }
        self.xhat = Vec::new();
        dx
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], String> {
        if input[0] != self.channels {
            return Err(format!(
                "batch norm expects {} channels, got {}",
                self.channels, input[0]
            ));
        }
        Ok(input)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(Param<'_, T>)) {
        f(Param {
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
            decay: false,
        });
        f(Param {
            value: &mut self.beta,
            grad: &mut self.grad_beta,
            decay: false,
        });
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(&mut self.moving_mean);
        f(&mut self.moving_var);
    }

    fn kind(&self) -> &'static str {
        "batch_norm"
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = x.data.iter().map(|&v| v > T::zero()).collect();
        self.infer(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Tensor {
            shape: x.shape,
            data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
        }
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        need_dx.then(|| Tensor {
            shape: dy.shape,
            data: dy
                .data
                .iter()
                .zip(&self.mask)
                .map(|(&g, &on)| if on { g } else { T::zero() })
                .collect(),
        })
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], String> {
        Ok(input)
    }

    fn kind(&self) -> &'static str {
        "relu"
    }
}

// ---------------------------------------------------------------------------

/// Max pooling; padded positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            argmax: Vec::new(),
            in_shape: [0; 4],
        }
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>, mut record: Option<&mut Vec<usize>>) -> Tensor<T> {
        let [b, c, h, w] = x.shape;
        let ho = conv_out(h, self.kernel, self.stride, self.pad).expect("validated shape");
        let wo = conv_out(w, self.kernel, self.stride, self.pad).expect("validated shape");
        let mut out = Tensor::zeros([b, c, ho, wo]);
        let mut o = 0;
        for plane_idx in 0..b * c {
            let base = plane_idx * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let at = base + iy as usize * w + ix as usize;
                            if best_at == usize::MAX || x.data[at] > best {
                                best = x.data[at];
                                best_at = at;
                            }
                        }
                    }
                    out.data[o] = best;
                    if let Some(rec) = record.as_deref_mut() {
                        rec.push(best_at);
                    }
                    o += 1;
                }
            }
        }
        out
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut argmax = Vec::new();
        let y = self.run(x, Some(&mut argmax));
        self.argmax = argmax;
        self.in_shape = x.shape;
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, None)
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(self.in_shape);
        for (&at, &g) in self.argmax.iter().zip(&dy.data) {
            dx.data[at] += g;
        }
        Some(dx)
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3], String> {
        if self.pad >= self.kernel {
            return Err("pool padding must be smaller than the window".into());
        }
        match (
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        ) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok([c, ho, wo]),
            _ => Err(format!("pool window {} does not fit {h}x{w}", self.kernel)),
        }
    }

    fn kind(&self) -> &'static str {
        "max_pool"
    }
}

// ---------------------------------------------------------------------------

/// Fully connected layer on flattened samples (`[n, in, 1, 1]` or any
/// shape whose per-sample size is `in_features`).
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    grad_w: Vec<T>,
    grad_b: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: he_normal(in_features * out_features, in_features, rng),
            bias: vec![T::zero(); out_features],
            grad_w: vec![T::zero(); in_features * out_features],
            grad_b: vec![T::zero(); out_features],
            input: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.batch();
        assert_eq!(x.sample_len(), self.in_features, "dense input size");
        let mut y = Tensor::zeros([b, self.out_features, 1, 1]);
        for row in y.data.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias);
        }
        // Y = X · Wᵀ + b
        T::gemm(
            b,
            self.in_features,
            self.out_features,
            T::one(),
            &x.data,
            (self.in_features as isize, 1),
            &self.weight,
            (1, self.in_features as isize),
            T::one(),
            &mut y.data,
            (self.out_features as isize, 1),
        );
        y
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.run(x);
        self.input = Some(x.clone());
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x)
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("backward without forward_train");
        let b = x.batch();
        let (fin, fout) = (self.in_features, self.out_features);
        // dW += dYᵀ · X
        T::gemm(
            fout,
            b,
            fin,
            T::one(),
            &dy.data,
            (1, fout as isize),
            &x.data,
            (fin as isize, 1),
            T::one(),
            &mut self.grad_w,
            (fin as isize, 1),
        );
        for row in dy.data.chunks_exact(fout) {
            for (g, &d) in self.grad_b.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape);
            T::gemm(
                b,
                fout,
                fin,
                T::one(),
                &dy.data,
                (fout as isize, 1),
                &self.weight,
                (fin as isize, 1),
                T::zero(),
                &mut dx.data,
                (fin as isize, 1),
            );
            dx
        })
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3], String> {
        if c * h * w != self.in_features {
            return Err(format!(
                "dense expects {} features, got {}",
                self.in_features,
                c * h * w
            ));
        }
        Ok([self.out_features, 1, 1])
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(Param<'_, T>)) {
        f(Param {
            value: &mut self.weight,
            grad: &mut self.grad_w,
            decay: true,
        });
        f(Param {
            value: &mut self.bias,
            grad: &mut self.grad_b,
            decay: false,
        });
    }

    fn kind(&self) -> &'static str {
        "dense"
    }
}

// ---------------------------------------------------------------------------

/// Inverted dropout: kept units are scaled by `1/(1 − rate)` during
/// training; inference is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Vec<T>,
    reuse_mask: bool,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Self {
            rate,
            rng,
            mask: Vec::new(),
            reuse_mask: false,
        }
    }

    /// Keeps the current mask for subsequent forward passes (finite-difference
    /// checks need a fixed function).
    pub fn freeze_mask(&mut self, freeze: bool) {
        self.reuse_mask = freeze;
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        if !(self.reuse_mask && self.mask.len() == x.data.len()) {
            let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
            let rate = self.rate;
            let rng = &mut self.rng;
            self.mask = (0..x.data.len())
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
        }
        Tensor {
            shape: x.shape,
            data: x.data.iter().zip(&self.mask).map(|(&v, &m)| v * m).collect(),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        need_dx.then(|| Tensor {
            shape: dy.shape,
            data: dy.data.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect(),
        })
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], String> {
        Ok(input)
    }

    fn freeze_random(&mut self, freeze: bool) {
        self.freeze_mask(freeze);
    }

    fn kind(&self) -> &'static str {
        "dropout"
    }
}

// ---------------------------------------------------------------------------

/// conv-BN-ReLU → conv-BN, plus a skip path (identity, or 1×1 conv + BN
/// when the shape changes), summed and passed through a final ReLU.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu1: Relu,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm2d::new(out_ch),
            )
        });
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_ch),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_ch),
            shortcut,
            relu_out: Relu::new(),
        }
    }
}

fn add_into<T: Scalar>(mut a: Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape, b.shape, "residual add joins equal shapes");
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    a
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward_train(x);
        let h = self.bn1.forward_train(&h);
        let h = self.relu1.forward_train(&h);
        let h = self.conv2.forward_train(&h);
        let h = self.bn2.forward_train(&h);
        let sum = match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = conv.forward_train(x);
                add_into(h, &bn.forward_train(&s))
            }
            None => add_into(h, x),
        };
        self.relu_out.forward_train(&sum)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.infer(x);
        let h = self.bn1.infer(&h);
        let h = Layer::<T>::infer(&self.relu1, &h);
        let h = self.conv2.infer(&h);
        let h = self.bn2.infer(&h);
        let sum = match &self.shortcut {
            Some((conv, bn)) => add_into(h, &bn.infer(&conv.infer(x))),
            None => add_into(h, x),
        };
        Layer::<T>::infer(&self.relu_out, &sum)
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let d = Layer::<T>::backward(&mut self.relu_out, dy, true).expect("dx");
        let g = self.bn2.backward(&d, true).expect("dx");
        let g = self.conv2.backward(&g, true).expect("dx");
        let g = Layer::<T>::backward(&mut self.relu1, &g, true).expect("dx");
        let g = self.bn1.backward(&g, true).expect("dx");
        let dx_main = self.conv1.backward(&g, need_dx);
        let dx_skip = match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = bn.backward(&d, true).expect("dx");
                conv.backward(&s, need_dx)
            }
            None => need_dx.then_some(d),
        };
        match (dx_main, dx_skip) {
            (Some(a), Some(b)) => Some(add_into(a, &b)),
            _ => None,
        }
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], String> {
        let main = self.conv1.output_shape(input)?;
        let main = self.conv2.output_shape(main)?;
        let skip = match &self.shortcut {
            Some((conv, _)) => conv.output_shape(input)?,
            None => input,
        };
        if main != skip {
            return Err(format!(
                "residual add joins {main:?} and {skip:?}"
            ));
        }
        Ok(main)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(Param<'_, T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, bn)) = self.shortcut.as_mut() {
            bn.visit_buffers(f);
        }
    }

    fn kind(&self) -> &'static str {
        "residual_block"
    }
}

/// Row-wise softmax over `[n, classes, 1, 1]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.sample_len();
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}
