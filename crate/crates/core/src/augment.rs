//! Stochastic augmentation cascade for `C x T` signals (row-major per
//! channel). Each augmentation fires independently with its own
//! probability, always in the order cut-out, magnitude warp, Gaussian
//! noise, channel permutation, time warp.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub cut_out: f64,
    pub magnitude_warp: f64,
    pub gaussian_noise: f64,
    pub channel_permute: f64,
    pub time_warp: f64,
    /// Cut-out window length range as fractions of the segment.
    pub cut_out_min: f64,
    pub cut_out_max: f64,
    pub warp_knots: usize,
    /// Std of the magnitude-warp knot values around 1.
    pub magnitude_sigma: f64,
    pub noise_sigma: f64,
    /// Std of time-warp knot displacement as a fraction of the segment.
    pub time_warp_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            cut_out: 0.4,
            magnitude_warp: 0.25,
            gaussian_noise: 0.25,
            channel_permute: 0.25,
            time_warp: 0.15,
            cut_out_min: 0.05,
            cut_out_max: 0.2,
            warp_knots: 4,
            magnitude_sigma: 0.2,
            noise_sigma: 0.15,
            time_warp_sigma: 0.04,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.cut_out, self.magnitude_warp, self.gaussian_noise, self.channel_permute, self.time_warp];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CoreError::InvalidArgument("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.cut_out_min) || self.cut_out_max < self.cut_out_min || self.cut_out_max > 1.0 {
            return Err(CoreError::InvalidArgument("cut-out window fractions must satisfy 0 <= min <= max <= 1".into()));
        }
        if self.warp_knots < 2 || self.magnitude_sigma < 0.0 || self.noise_sigma < 0.0 || self.time_warp_sigma < 0.0 {
            return Err(CoreError::InvalidArgument("warp knots must be >= 2 and strengths non-negative".into()));
        }
        Ok(())
    }
}

/// Which augmentations fired on one call of [`apply_cascade`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Applied {
    pub cut_out: bool,
    pub magnitude_warp: bool,
    pub gaussian_noise: bool,
    pub channel_permute: bool,
    pub time_warp: bool,
}

pub fn apply_cascade<R: Rng>(signal: &mut [f32], channels: usize, cfg: &AugmentConfig, rng: &mut R) -> Applied {
    let mut applied = Applied::default();
    if !cfg.enabled {
        return applied;
    }
    if rng.random_bool(cfg.cut_out) {
        cut_out(signal, channels, cfg, rng);
        applied.cut_out = true;
    }
    if rng.random_bool(cfg.magnitude_warp) {
        magnitude_warp(signal, channels, cfg, rng);
        applied.magnitude_warp = true;
    }
    if rng.random_bool(cfg.gaussian_noise) {
        gaussian_noise(signal, cfg.noise_sigma, rng);
        applied.gaussian_noise = true;
    }
    if rng.random_bool(cfg.channel_permute) {
        channel_permute(signal, channels, rng);
        applied.channel_permute = true;
    }
    if rng.random_bool(cfg.time_warp) {
        time_warp(signal, channels, cfg, rng);
        applied.time_warp = true;
    }
    applied
}

/// Zeroes one window on all channels. Returns `(start, len)`.
pub fn cut_out<R: Rng>(signal: &mut [f32], channels: usize, cfg: &AugmentConfig, rng: &mut R) -> (usize, usize) {
    let t = signal.len() / channels;
    let lo = (cfg.cut_out_min * t as f64).round() as usize;
    let hi = ((cfg.cut_out_max * t as f64).round() as usize).min(t);
    let len = rng.random_range(lo..=hi.max(lo));
    if len == 0 {
        return (0, 0);
    }
    let start = rng.random_range(0..=t - len);
    for c in 0..channels {
        signal[c * t + start..c * t + start + len].fill(0.0);
    }
    (start, len)
}

/// Evenly spaced knot positions over `[0, t - 1]`.
fn knot_positions(t: usize, knots: usize) -> Vec<f64> {
    (0..knots).map(|i| i as f64 * (t - 1) as f64 / (knots - 1) as f64).collect()
}

/// Natural cubic spline through `(xs, ys)` evaluated at `0..t`.
pub fn natural_spline(xs: &[f64], ys: &[f64], t: usize) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives from the tridiagonal system, Thomas algorithm.
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (0..k).rev() {
            let upper = if i + 1 < k { h[i + 1] * m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - upper) / diag[i];
        }
    }
    eval_piecewise(xs, t, |seg, x| {
        let (x0, x1) = (xs[seg], xs[seg + 1]);
        let hh = h[seg];
        let (a, b) = ((x1 - x) / hh, (x - x0) / hh);
        a * ys[seg] + b * ys[seg + 1] + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * hh * hh / 6.0
    })
}

/// Monotone piecewise-cubic Hermite interpolation (Fritsch-Carlson slopes)
/// evaluated at `0..t`. Strictly increasing data give a strictly increasing
/// curve.
pub fn monotone_spline(xs: &[f64], ys: &[f64], t: usize) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    d[0] = delta[0];
    d[n - 1] = delta[n - 2];
    for i in 1..n - 1 {
        d[i] = if delta[i - 1] * delta[i] <= 0.0 {
            0.0
        } else {
            let (w1, w2) = (2.0 * h[i] + h[i - 1], h[i] + 2.0 * h[i - 1]);
            (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i])
        };
    }
    eval_piecewise(xs, t, |seg, x| {
        let hh = h[seg];
        let s = (x - xs[seg]) / hh;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * ys[seg]
            + (s3 - 2.0 * s2 + s) * hh * d[seg]
            + (-2.0 * s3 + 3.0 * s2) * ys[seg + 1]
            + (s3 - s2) * hh * d[seg + 1]
    })
}

fn eval_piecewise(xs: &[f64], t: usize, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let last = xs.len() - 2;
    let mut seg = 0;
    (0..t)
        .map(|i| {
            let x = i as f64;
            while seg < last && x > xs[seg + 1] {
                seg += 1;
            }
            f(seg, x)
        })
        .collect()
}

/// Multiplies each channel by a smooth random curve through knots drawn
/// from `N(1, sigma^2)`, floored at 0.1 so signs never flip.
pub fn magnitude_warp<R: Rng>(signal: &mut [f32], channels: usize, cfg: &AugmentConfig, rng: &mut R) {
    let t = signal.len() / channels;
    if t < 2 || cfg.magnitude_sigma == 0.0 {
        return;
    }
    let xs = knot_positions(t, cfg.warp_knots);
    for c in 0..channels {
        let ys: Vec<f64> = (0..cfg.warp_knots)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                1.0 + cfg.magnitude_sigma * e
            })
            .collect();
        let curve = natural_spline(&xs, &ys, t);
        for (v, k) in signal[c * t..(c + 1) * t].iter_mut().zip(&curve) {
            *v = (*v as f64 * k.max(0.1)) as f32;
        }
    }
}

pub fn gaussian_noise<R: Rng>(signal: &mut [f32], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in signal.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + sigma * e) as f32;
    }
}

/// Reorders channel rows by a uniformly random permutation, returned as
/// `perm[new] = old`.
pub fn channel_permute<R: Rng>(signal: &mut [f32], channels: usize, rng: &mut R) -> Vec<usize> {
    let t = signal.len() / channels;
    let mut perm: Vec<usize> = (0..channels).collect();
    perm.shuffle(rng);
    let src = signal.to_vec();
    for (new, &old) in perm.iter().enumerate() {
        signal[new * t..(new + 1) * t].copy_from_slice(&src[old * t..(old + 1) * t]);
    }
    perm
}

/// Strictly increasing map of `0..t` onto `[0, t - 1]` with both ends
/// pinned: interior knots are displaced by `N(0, (sigma * t)^2)` and joined
/// by a monotone cubic.
pub fn time_warp_map<R: Rng>(t: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let xs = knot_positions(t, cfg.warp_knots + 2);
    let sd = cfg.time_warp_sigma * t as f64;
    if sd == 0.0 {
        return (0..t).map(|i| i as f64).collect();
    }
    let mut ys = xs.clone();
    for _ in 0..100 {
        for i in 1..xs.len() - 1 {
            let e: f64 = StandardNormal.sample(rng);
            ys[i] = xs[i] + sd * e;
        }
        if ys.windows(2).all(|w| w[1] > w[0]) {
            return monotone_spline(&xs, &ys, t);
        }
    }
    (0..t).map(|i| i as f64).collect()
}

pub fn time_warp<R: Rng>(signal: &mut [f32], channels: usize, cfg: &AugmentConfig, rng: &mut R) {
    let t = signal.len() / channels;
    if t < 2 {
        return;
    }
    let map = time_warp_map(t, cfg, rng);
    let src = signal.to_vec();
    for c in 0..channels {
        let row = &src[c * t..(c + 1) * t];
        for (i, &pos) in map.iter().enumerate() {
            let pos = pos.clamp(0.0, (t - 1) as f64);
            let j = (pos.floor() as usize).min(t - 2);
            let frac = pos - j as f64;
            signal[c * t + i] = if frac == 0.0 {
                row[j]
            } else {
                ((1.0 - frac) * row[j] as f64 + frac * row[j + 1] as f64) as f32
            };
        }
    }
}
