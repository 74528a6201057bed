//! Beat → Wigner-Ville image → coordinate ramp.
//!
//! The discrete distribution uses the integer-lag kernel
//! `K[n, m] = x[n+m]·conj(x[n−m])`, `|m| ≤ min(n, N−1−n)`, followed by an
//! `N`-point DFT over the lag with the analysis sign `e^{−j2πkm/N}`. Row `k`
//! of the image is DFT bin `k` (row 0 is DC) and column `n` is time sample
//! `n`. Because the lag steps by whole samples on both sides, a tone at bin
//! `f` shows up at row `2f mod N`.
//!
//! With this normalization the marginals are exact: column `n` sums to
//! `N·|x[n]|²` and the whole image sums to `N·Σ|x|²`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// Model input side length.
pub const IMAGE_SIZE: usize = 128;
pub const DEFAULT_RAMP_STRENGTH: f64 = 0.25;

/// Real time-frequency image, row-major, `rows` frequency bins by `cols`
/// time samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WvdImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub fs: f64,
    pub ramp_strength: f64,
}

impl WvdImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            fs: 0.0,
            ramp_strength: 0.0,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.get(r, col))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampConfig {
    /// Value added at the last time column; the first column gets zero.
    pub strength: f64,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self {
            strength: DEFAULT_RAMP_STRENGTH,
        }
    }
}

/// Linear interpolation onto `n` uniformly spaced points; endpoints map to
/// endpoints.
pub fn resample_beat(x: &[f64], n: usize) -> Vec<f64> {
    assert!(x.len() >= 2 && n >= 2, "need at least two samples in and out");
    let scale = (x.len() - 1) as f64 / (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i == n - 1 {
                return x[x.len() - 1];
            }
            let pos = i as f64 * scale;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            if frac == 0.0 {
                x[k]
            } else {
                x[k] * (1.0 - frac) + x[k + 1] * frac
            }
        })
        .collect()
}

/// FFT plans shared by the analytic-signal and WVD steps for one length.
#[derive(Clone)]
pub struct TfrPlan {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for TfrPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TfrPlan").field("n", &self.n).finish()
    }
}

impl TfrPlan {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Analytic signal of a real vector of this plan's length (which must be
    /// even).
    pub fn analytic(&self, x: &[f64]) -> Vec<Complex64> {
        let n = self.n;
        assert_eq!(x.len(), n);
        assert!(n % 2 == 0, "analytic plan needs an even length");
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        // keep DC and Nyquist, double positive bins, drop negative bins
        for (k, z) in buf.iter_mut().enumerate() {
            let h = if k == 0 || k == n / 2 {
                1.0
            } else if k < n / 2 {
                2.0
            } else {
                0.0
            };
            *z *= h / n as f64;
        }
        self.inverse.process(&mut buf);
        // the real part is x by construction; write it back exactly
        for (z, &v) in buf.iter_mut().zip(x) {
            z.re = v;
        }
        buf
    }

    /// Returns the image and the largest imaginary residue relative to the
    /// largest real magnitude.
    pub fn wvd_with_residue(&self, x: &[Complex64]) -> (WvdImage, f64) {
        let n = self.n;
        assert_eq!(x.len(), n);
        assert!(n >= 2, "WVD needs at least two samples");
        let mut image = WvdImage::zeros(n, n);
        let mut kernel = vec![Complex64::new(0.0, 0.0); n];
        let mut max_re = 0.0f64;
        let mut max_im = 0.0f64;
        for t in 0..n {
            kernel.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            let max_lag = t.min(n - 1 - t);
            for m in 0..=max_lag {
                kernel[m] = x[t + m] * x[t - m].conj();
                if m > 0 {
                    kernel[n - m] = x[t - m] * x[t + m].conj();
                }
            }
            self.forward.process(&mut kernel);
            for (k, z) in kernel.iter().enumerate() {
                image.values[k * n + t] = z.re;
                max_re = max_re.max(z.re.abs());
                max_im = max_im.max(z.im.abs());
            }
        }
        let residue = if max_re > 0.0 { max_im / max_re } else { max_im };
        (image, residue)
    }
}

/// Analytic signal via the FFT: negative-frequency bins are zeroed, positive
/// bins doubled, DC and Nyquist kept. Odd-length input is padded with one
/// zero for the transform and truncated back afterwards.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    if x.is_empty() {
        return Vec::new();
    }
    if x.len() % 2 == 0 {
        return TfrPlan::new(x.len()).analytic(x);
    }
    let mut padded = x.to_vec();
    padded.push(0.0);
    let mut out = TfrPlan::new(padded.len()).analytic(&padded);
    out.truncate(x.len());
    out
}

pub fn compute_wvd(x: &[Complex64]) -> WvdImage {
    compute_wvd_with_residue(x).0
}

pub fn compute_wvd_with_residue(x: &[Complex64]) -> (WvdImage, f64) {
    TfrPlan::new(x.len()).wvd_with_residue(x)
}

/// Affine map onto `[0, 1]`; a constant image maps to zeros.
pub fn normalize_image(img: &WvdImage) -> WvdImage {
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    let values = if span > 0.0 {
        img.values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; img.values.len()]
    };
    WvdImage {
        values,
        ..img.clone()
    }
}

/// The additive ramp on its own: `strength·c/(cols−1)` in every row.
pub fn ramp_image(rows: usize, cols: usize, strength: f64) -> WvdImage {
    let mut img = WvdImage::zeros(rows, cols);
    add_ramp_in_place(&mut img, strength);
    img.ramp_strength = strength;
    img
}

fn add_ramp_in_place(img: &mut WvdImage, strength: f64) {
    assert!(img.cols >= 2, "ramp needs at least two time columns");
    let denom = (img.cols - 1) as f64;
    for row in img.values.chunks_exact_mut(img.cols) {
        for (c, v) in row.iter_mut().enumerate() {
            *v += strength * c as f64 / denom;
        }
    }
}

/// Adds a linear gradient along the time axis: column `c` gains
/// `strength·c/(cols−1)`.
pub fn add_coordinate_ramp(img: &WvdImage, cfg: RampConfig) -> WvdImage {
    assert!(cfg.strength >= 0.0, "ramp strength must be non-negative");
    let mut out = img.clone();
    add_ramp_in_place(&mut out, cfg.strength);
    out.ramp_strength = img.ramp_strength + cfg.strength;
    out
}

/// Bilinear resize; corner values are preserved.
pub fn resize_image(img: &WvdImage, rows: usize, cols: usize) -> WvdImage {
    assert!(img.rows >= 2 && img.cols >= 2, "source must be at least 2x2");
    assert!(rows >= 2 && cols >= 2, "target must be at least 2x2");
    let axis = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if i == n_out - 1 {
            return (n_in - 1, n_in - 1, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let k = pos.floor() as usize;
        (k, (k + 1).min(n_in - 1), pos - k as f64)
    };
    let mut out = WvdImage {
        rows,
        cols,
        values: vec![0.0; rows * cols],
        ..img.clone()
    };
    for r in 0..rows {
        let (r0, r1, fr) = axis(r, rows, img.rows);
        for c in 0..cols {
            let (c0, c1, fc) = axis(c, cols, img.cols);
            let top = img.get(r0, c0) * (1.0 - fc) + img.get(r0, c1) * fc;
            let bottom = img.get(r1, c0) * (1.0 - fc) + img.get(r1, c1) * fc;
            out.values[r * cols + c] = top * (1.0 - fr) + bottom * fr;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub size: usize,
    pub analytic: bool,
    pub ramp_strength: f64,
    pub fs: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            size: IMAGE_SIZE,
            analytic: true,
            ramp_strength: DEFAULT_RAMP_STRENGTH,
            fs: 125.0,
        }
    }
}

/// The full beat-to-image path: resample to `size` samples → analytic
/// signal (optional) → WVD → `[0, 1]` normalization → ramp.
#[derive(Debug, Clone)]
pub struct BeatTransform {
    cfg: TransformConfig,
    plan: TfrPlan,
}

impl BeatTransform {
    pub fn new(cfg: TransformConfig) -> Self {
        assert!(cfg.size >= 2 && cfg.size % 2 == 0, "image size must be even");
        Self {
            plan: TfrPlan::new(cfg.size),
            cfg,
        }
    }

    pub fn config(&self) -> &TransformConfig {
        &self.cfg
    }

    pub fn transform(&self, beat: &[f64]) -> WvdImage {
        let x = resample_beat(beat, self.cfg.size);
        let z = if self.cfg.analytic {
            self.plan.analytic(&x)
        } else {
            x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
        };
        let (mut img, _) = self.plan.wvd_with_residue(&z);
        img.fs = self.cfg.fs * self.cfg.size as f64 / beat.len() as f64;
        let img = normalize_image(&img);
        if self.cfg.ramp_strength > 0.0 {
            add_coordinate_ramp(
                &img,
                RampConfig {
                    strength: self.cfg.ramp_strength,
                },
            )
        } else {
            img
        }
    }

    /// Transforms into a single-precision buffer (the model input layout).
    pub fn transform_f32(&self, beat: &[f64]) -> Vec<f32> {
        self.transform(beat).values.iter().map(|&v| v as f32).collect()
    }
}

impl Default for BeatTransform {
    fn default() -> Self {
        Self::new(TransformConfig::default())
    }
}
