//! Raw-strip preprocessing: fixed windows, min-max normalization, R-peak
//! detection from first-difference sign changes, and fixed-length beat
//! extraction around each peak.

use std::f64::consts::PI;

/// Minimum spacing between accepted R-peaks.
pub const REFRACTORY_S: f64 = 0.2;
/// Default peak threshold as a fraction of the window maximum.
pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const DEFAULT_WINDOW_S: f64 = 10.0;
pub const DEFAULT_BEAT_S: f64 = 1.2;
/// Beat duration implied by the 187-sample rows of the public files.
pub const LONG_BEAT_S: f64 = 1.496;
/// R-peak position as a fraction of the beat window.
pub const ALIGNMENT_FRACTION: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EcgStrip {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl EcgStrip {
    pub fn new(samples: Vec<f64>, fs: f64) -> Self {
        assert!(fs > 0.0, "sampling rate must be positive");
        Self { samples, fs }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RPeakSet {
    pub indices: Vec<usize>,
    /// Median R-R interval in samples; zero with fewer than two peaks.
    pub median_rr: f64,
}

impl RPeakSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits into consecutive non-overlapping windows; a trailing partial
/// window is dropped.
pub fn window_strip(strip: &EcgStrip, window_s: f64) -> Vec<EcgStrip> {
    assert!(window_s > 0.0, "window length must be positive");
    let len = (window_s * strip.fs).round() as usize;
    if len == 0 {
        return Vec::new();
    }
    strip
        .samples
        .chunks_exact(len)
        .map(|c| EcgStrip::new(c.to_vec(), strip.fs))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWindow {
    pub strip: EcgStrip,
    /// Set when the input was constant; the output is then all zeros and no
    /// beats can be extracted from it.
    pub degenerate: bool,
}

pub fn normalize_window(w: &EcgStrip) -> NormalizedWindow {
    let (lo, hi) = min_max(&w.samples);
    let span = hi - lo;
    if !(span > 0.0) {
        return NormalizedWindow {
            strip: EcgStrip::new(vec![0.0; w.samples.len()], w.fs),
            degenerate: true,
        };
    }
    let samples = w.samples.iter().map(|v| (v - lo) / span).collect();
    NormalizedWindow {
        strip: EcgStrip::new(samples, w.fs),
        degenerate: false,
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Indices where the first difference changes sign from positive to
/// non-positive. A plateau reports its first sample.
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < x.len() {
        if x[i] > x[i - 1] {
            // walk over a flat top, then require a fall
            let mut j = i;
            while j + 1 < x.len() && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < x.len() && x[j + 1] < x[i] {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Finds R-peaks: local maxima at or above `threshold` × window maximum,
/// thinned so no two accepted peaks are closer than [`REFRACTORY_S`]
/// (the taller one wins).
pub fn detect_r_peaks(w: &EcgStrip, threshold: f64) -> RPeakSet {
    let (_, hi) = min_max(&w.samples);
    if w.samples.is_empty() || !(hi > 0.0) {
        return RPeakSet::default();
    }
    let level = threshold * hi;
    let refractory = (REFRACTORY_S * w.fs).round() as usize;

    let mut indices: Vec<usize> = Vec::new();
    for i in local_maxima(&w.samples) {
        if w.samples[i] < level {
            continue;
        }
        match indices.last_mut() {
            Some(last) if i - *last < refractory => {
                if w.samples[i] > w.samples[*last] {
                    *last = i;
                }
            }
            _ => indices.push(i),
        }
    }
    let median_rr = median_interval(&indices);
    RPeakSet { indices, median_rr }
}

fn median_interval(indices: &[usize]) -> f64 {
    let mut rr: Vec<usize> = indices.windows(2).map(|p| p[1] - p[0]).collect();
    if rr.is_empty() {
        return 0.0;
    }
    rr.sort_unstable();
    let mid = rr.len() / 2;
    if rr.len() % 2 == 1 {
        rr[mid] as f64
    } else {
        (rr[mid - 1] + rr[mid]) as f64 / 2.0
    }
}

pub fn beat_length(beat_s: f64, fs: f64) -> usize {
    (beat_s * fs).round() as usize
}

/// Offset of the R-peak inside a beat of `len` samples.
pub fn alignment_offset(len: usize) -> usize {
    (len as f64 * ALIGNMENT_FRACTION).floor() as usize
}

/// Cuts one `round(beat_s·fs)`-sample vector per peak, with the peak at
/// [`alignment_offset`]; samples outside the strip are zero.
pub fn extract_beats(w: &EcgStrip, peaks: &RPeakSet, beat_s: f64) -> Vec<Vec<f64>> {
    let len = beat_length(beat_s, w.fs);
    let offset = alignment_offset(len) as isize;
    peaks
        .indices
        .iter()
        .map(|&p| {
            let start = p as isize - offset;
            (0..len as isize)
                .map(|k| {
                    let i = start + k;
                    if i >= 0 && (i as usize) < w.samples.len() {
                        w.samples[i as usize]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Hamming-windowed sinc low-pass taps with cutoff `cutoff` in cycles per
/// sample (0 < cutoff ≤ 0.5), normalized to unit DC gain.
pub fn lowpass_taps(cutoff: f64, num_taps: usize) -> Vec<f64> {
    assert!(num_taps % 2 == 1, "odd tap count keeps the filter zero-phase");
    let mid = (num_taps / 2) as f64;
    let mut taps: Vec<f64> = (0..num_taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (num_taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= gain);
    taps
}

/// Zero-phase FIR filtering with edge samples held (no zero drop-off at the
/// borders).
fn filter_hold_edges(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(k, t)| {
                    let j = (i + k as isize - half).clamp(0, n - 1);
                    t * x[j as usize]
                })
                .sum()
        })
        .collect()
}

/// Resamples to `target_fs`: when downsampling, a windowed-sinc low-pass at
/// the new Nyquist frequency runs first; the new grid is then read by linear
/// interpolation.
pub fn resample(x: &[f64], fs: f64, target_fs: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let out_len = ((x.len() as f64) * target_fs / fs).round().max(1.0) as usize;
    let filtered = if target_fs < fs {
        filter_hold_edges(x, &lowpass_taps(0.5 * target_fs / fs, 63))
    } else {
        x.to_vec()
    };
    let step = fs / target_fs;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let k = pos.floor() as usize;
            if k + 1 >= filtered.len() {
                return filtered[filtered.len() - 1];
            }
            let frac = pos - k as f64;
            filtered[k] * (1.0 - frac) + filtered[k + 1] * frac
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentConfig {
    pub window_s: f64,
    pub threshold: f64,
    pub beat_s: f64,
    /// Beats are resampled to this rate (the public files use 125 Hz).
    pub target_fs: f64,
    /// Beats are zero-padded (or truncated) at the tail to this many samples.
    pub row_len: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            window_s: DEFAULT_WINDOW_S,
            threshold: DEFAULT_THRESHOLD,
            beat_s: DEFAULT_BEAT_S,
            target_fs: 125.0,
            row_len: crate::ingest::DEFAULT_BEAT_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentSummary {
    pub windows: usize,
    pub degenerate_windows: usize,
    pub beats: usize,
}

/// Full raw-strip path: window → normalize → detect → extract → resample →
/// pad. Resampled values are clamped back into `[0, 1]` because the
/// low-pass can ring slightly past the normalized range.
pub fn segment_strip(strip: &EcgStrip, cfg: &SegmentConfig) -> (Vec<Vec<f64>>, SegmentSummary) {
    let mut summary = SegmentSummary::default();
    let mut beats = Vec::new();
    for window in window_strip(strip, cfg.window_s) {
        summary.windows += 1;
        let norm = normalize_window(&window);
        if norm.degenerate {
            summary.degenerate_windows += 1;
            continue;
        }
        let peaks = detect_r_peaks(&norm.strip, cfg.threshold);
        for beat in extract_beats(&norm.strip, &peaks, cfg.beat_s) {
            let mut b = resample(&beat, strip.fs, cfg.target_fs);
            b.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            b.resize(cfg.row_len, 0.0);
            beats.push(b);
        }
    }
    summary.beats = beats.len();
    (beats, summary)
}
