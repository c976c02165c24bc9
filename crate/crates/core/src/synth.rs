//! Synthetic paired PPG / wrist-accelerometry segments driven by one latent
//! beat sequence, plus the bandpass / decimate / z-score preprocessing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PPG_CHANNELS: usize = 4;
pub const ACCEL_CHANNELS: usize = 3;
pub const RR_MIN: f64 = 0.3;
pub const RR_MAX: f64 = 2.0;

const SYSTOLIC_DELAY_S: f64 = 0.18;
const SYSTOLIC_WIDTH_S: f64 = 0.07;
const DICROTIC_DELAY_S: f64 = 0.42;
const DICROTIC_WIDTH_S: f64 = 0.06;
const DICROTIC_AMPLITUDE: f64 = 0.35;
/// Delay of the ballistocardiogram recoil after beat onset.
pub const BCG_LATENCY_S: f64 = 0.12;
const BCG_KERNEL_S: f64 = 0.6;

/// Generator knobs. Defaults give 200 participants with 20 segments each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub participants: usize,
    pub segments: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub raw_rate_hz: f64,
    pub out_rate_hz: f64,
    /// Lag-one coefficient of the beat-interval process.
    pub ar_coeff: f64,
    /// PPG noise std as a fraction of the clean channel std.
    pub ppg_noise: f64,
    /// Accelerometer noise std as a fraction of the clean channel std.
    pub accel_noise: f64,
    /// Baseline-drift amplitude relative to a unit systolic peak.
    pub drift_amplitude: f64,
    pub motion_prob: f64,
    pub bcg_amplitude: f64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            participants: 200,
            segments: 20,
            seed: 0,
            duration_s: 60.0,
            raw_rate_hz: 256.0,
            out_rate_hz: 64.0,
            ar_coeff: 0.8,
            ppg_noise: 0.05,
            accel_noise: 0.3,
            drift_amplitude: 0.5,
            motion_prob: 0.1,
            bcg_amplitude: 1.0,
            train_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidArgument(m.to_string()));
        if self.participants < 2 {
            return bad("need at least 2 participants");
        }
        if self.segments < 4 {
            return bad("need at least 4 segments per participant");
        }
        if self.duration_s <= 0.0 || self.raw_rate_hz <= 0.0 || self.out_rate_hz <= 0.0 {
            return bad("duration and rates must be positive");
        }
        let factor = self.raw_rate_hz / self.out_rate_hz;
        if factor < 1.0 || (factor - factor.round()).abs() > 1e-9 {
            return bad("raw rate must be an integer multiple of the output rate");
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return bad("ar_coeff must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.motion_prob) || !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction <= 0.0 {
            return bad("probabilities out of range");
        }
        Ok(())
    }

    pub fn raw_samples(&self) -> usize {
        (self.duration_s * self.raw_rate_hz).round() as usize
    }

    pub fn out_samples(&self) -> usize {
        (self.duration_s * self.out_rate_hz).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub participant_id: u32,
    pub mean_hr: f64,
    pub hrv_scale: f64,
    pub ppg_gains: [f64; PPG_CHANNELS],
    pub ppg_delays: [f64; PPG_CHANNELS],
    pub accel_gains: [f64; ACCEL_CHANNELS],
    pub bcg_freq: [f64; ACCEL_CHANNELS],
    pub bcg_decay: [f64; ACCEL_CHANNELS],
    /// Row-major rotation applied to the per-beat recoil vector.
    pub rotation: [[f64; 3]; 3],
    pub binary_trait: bool,
}

/// Independent random stream for a `(participant, segment)` cell. Profiles
/// use segment index `u32::MAX`.
pub fn cell_rng(seed: u64, participant: u32, segment: u32) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((participant as u64) << 32) | segment as u64);
    rng
}

fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Draws `n` participant profiles. The trait flag marks mean heart rate
/// above the population median.
pub fn make_profiles(n: usize, seed: u64) -> Vec<ParticipantProfile> {
    let hr_dist = Normal::<f64>::new(70.0, 10.0).expect("valid normal");
    let mut profiles: Vec<ParticipantProfile> = (0..n as u32)
        .map(|id| {
            let rng = &mut cell_rng(seed, id, u32::MAX);
            let mean_hr = hr_dist.sample(rng).clamp(40.0, 120.0);
            let hrv_scale = (rng.random_range(10f64.ln()..120f64.ln())).exp();
            ParticipantProfile {
                participant_id: id,
                mean_hr,
                hrv_scale,
                ppg_gains: std::array::from_fn(|_| rng.random_range(0.5..1.5)),
                ppg_delays: std::array::from_fn(|_| rng.random_range(0.0..0.03)),
                accel_gains: std::array::from_fn(|_| rng.random_range(0.5..1.5)),
                bcg_freq: std::array::from_fn(|_| rng.random_range(3.0..7.0)),
                bcg_decay: std::array::from_fn(|_| rng.random_range(8.0..15.0)),
                rotation: random_rotation(rng),
                binary_trait: false,
            }
        })
        .collect();
    let mut hrs: Vec<f64> = profiles.iter().map(|p| p.mean_hr).collect();
    hrs.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { hrs[n / 2] } else { 0.5 * (hrs[n / 2 - 1] + hrs[n / 2]) };
    for p in &mut profiles {
        p.binary_trait = p.mean_hr > median;
    }
    profiles
}

/// Beat intervals in seconds from a stationary AR(1) process around
/// `60 / mean_hr`. The process std is inflated so the expected
/// finite-window SDNN matches `hrv_scale`. Draws leaving
/// `[RR_MIN, RR_MAX]` are redrawn. Values are rounded to `f32` precision
/// so stored records reproduce them exactly.
pub fn gen_rr_sequence<R: Rng>(profile: &ParticipantProfile, duration_s: f64, ar_coeff: f64, rng: &mut R) -> Vec<f64> {
    let mean_rr = 60.0 / profile.mean_hr;
    let expected_beats = (duration_s / mean_rr).max(2.0);
    let inflation = (1.0 - (1.0 + ar_coeff) / ((1.0 - ar_coeff) * expected_beats)).max(0.25);
    let sigma = profile.hrv_scale / 1000.0 / inflation.sqrt();
    let innov = sigma * (1.0 - ar_coeff * ar_coeff).sqrt();
    let draw = |prev: Option<f64>, rng: &mut R| {
        for _ in 0..100 {
            let e: f64 = StandardNormal.sample(rng);
            let x = match prev {
                None => sigma * e,
                Some(p) => ar_coeff * p + innov * e,
            };
            if (RR_MIN..=RR_MAX).contains(&(mean_rr + x)) {
                return x;
            }
        }
        prev.unwrap_or(0.0).clamp(RR_MIN - mean_rr, RR_MAX - mean_rr)
    };
    let mut rr = Vec::new();
    let mut total = 0.0;
    let mut x = draw(None, rng);
    while total < duration_s {
        let v = ((mean_rr + x) as f32) as f64;
        rr.push(v);
        total += v;
        x = draw(Some(x), rng);
    }
    rr
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub hr: f64,
    pub sdnn: f64,
    pub rmssd: f64,
}

/// Heart rate, SDNN and RMSSD (both in ms, population statistics).
pub fn labels_from_rr(rr: &[f64]) -> Result<Labels> {
    if rr.len() < 2 {
        return Err(CoreError::InvalidArgument(format!("need at least 2 beat intervals, got {}", rr.len())));
    }
    let n = rr.len() as f64;
    let mean = rr.iter().sum::<f64>() / n;
    let var = rr.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let msd = rr.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Labels { hr: 60.0 / mean, sdnn: 1000.0 * var.sqrt(), rmssd: 1000.0 * msd.sqrt() })
}

/// Beat onset times: the first beat starts at zero and each interval
/// starts the next.
pub fn beat_onsets(rr: &[f64]) -> Vec<f64> {
    let mut t = 0.0;
    rr.iter()
        .map(|r| {
            let at = t;
            t += r;
            at
        })
        .collect()
}

fn add_gaussian(out: &mut [f64], center: f64, width: f64, amp: f64, rate: f64) {
    let lo = ((center - 4.0 * width) * rate).floor().max(0.0) as usize;
    let hi = (((center + 4.0 * width) * rate).ceil().max(0.0) as usize).min(out.len());
    for (i, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let z = (i as f64 / rate - center) / width;
        *o += amp * (-0.5 * z * z).exp();
    }
}

fn std_of(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn add_noise<R: Rng>(x: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma * e;
        }
    }
}

/// Raw PPG, `PPG_CHANNELS x n` row-major at `cfg.raw_rate_hz`.
pub fn synth_ppg<R: Rng>(rr: &[f64], profile: &ParticipantProfile, cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    let (n, rate) = (cfg.raw_samples(), cfg.raw_rate_hz);
    let onsets = beat_onsets(rr);
    let mut out = Vec::with_capacity(PPG_CHANNELS * n);
    for c in 0..PPG_CHANNELS {
        let mut ch = vec![0.0; n];
        let gain = profile.ppg_gains[c];
        for &t in &onsets {
            let t0 = t + profile.ppg_delays[c];
            add_gaussian(&mut ch, t0 + SYSTOLIC_DELAY_S, SYSTOLIC_WIDTH_S, gain, rate);
            add_gaussian(&mut ch, t0 + DICROTIC_DELAY_S, DICROTIC_WIDTH_S, gain * DICROTIC_AMPLITUDE, rate);
        }
        let sigma = cfg.ppg_noise * std_of(&ch);
        add_noise(&mut ch, sigma, rng);
        let f = rng.random_range(0.02..0.1);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for (i, v) in ch.iter_mut().enumerate() {
            *v += cfg.drift_amplitude * (std::f64::consts::TAU * f * i as f64 / rate + phase).sin();
        }
        out.extend(ch);
    }
    out
}

/// Raw accelerometry, `ACCEL_CHANNELS x n` row-major. Each beat adds a
/// damped oscillation per body axis, rotated into the sensor frame.
pub fn synth_accel<R: Rng>(rr: &[f64], profile: &ParticipantProfile, cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    let (n, rate) = (cfg.raw_samples(), cfg.raw_rate_hz);
    let klen = (BCG_KERNEL_S * rate) as usize;
    let kernel: Vec<[f64; 3]> = (0..klen)
        .map(|i| {
            let tau = i as f64 / rate;
            let body: [f64; 3] = std::array::from_fn(|a| {
                (-profile.bcg_decay[a] * tau).exp() * (std::f64::consts::TAU * profile.bcg_freq[a] * tau).sin()
            });
            std::array::from_fn(|r| profile.rotation[r].iter().zip(&body).map(|(m, b)| m * b).sum::<f64>())
        })
        .collect();
    let mut unit = vec![vec![0.0; n]; ACCEL_CHANNELS];
    for &t in &beat_onsets(rr) {
        let start = ((t + BCG_LATENCY_S) * rate).round() as usize;
        for (i, k) in kernel.iter().enumerate() {
            let at = start + i;
            if at >= n {
                break;
            }
            for c in 0..ACCEL_CHANNELS {
                unit[c][at] += profile.accel_gains[c] * k[c];
            }
        }
    }
    let burst = rng.random_bool(cfg.motion_prob);
    let mut out = Vec::with_capacity(ACCEL_CHANNELS * n);
    for ch in unit.iter() {
        let ref_std = std_of(ch);
        let mut x: Vec<f64> = ch.iter().map(|v| v * cfg.bcg_amplitude).collect();
        add_noise(&mut x, cfg.accel_noise * ref_std, rng);
        out.push(x);
    }
    if burst {
        let len = ((rng.random_range(1.0..5.0) * rate) as usize).min(n);
        let start = rng.random_range(0..=n - len);
        for (c, x) in out.iter_mut().enumerate() {
            let amp = 3.0 * std_of(&unit[c]).max(1e-3);
            let comps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0)))
                .collect();
            for i in 0..len {
                let w = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / len as f64).cos();
                let t = i as f64 / rate;
                let v: f64 = comps.iter().map(|(f, p, a)| a * (std::f64::consts::TAU * f * t + p).sin()).sum();
                x[start + i] += amp * w * v;
            }
        }
    }
    out.concat()
}

/// Second-order section `b0 b1 b2 / 1 a1 a2`.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Butterworth (Q = 1/sqrt 2) low- or high-pass via the bilinear
    /// transform with prewarping.
    fn butterworth(cutoff: f64, rate: f64, highpass: bool) -> Self {
        let w0 = std::f64::consts::TAU * cutoff / rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / std::f64::consts::SQRT_2;
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self { b: b.map(|v| v / a0), a: [-2.0 * cos / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + z1;
            z1 = self.b[1] * *v - self.a[0] * y + z2;
            z2 = self.b[2] * *v - self.a[1] * y;
            *v = y;
        }
    }

    /// Magnitude response at `f` Hz.
    fn gain(&self, f: f64, rate: f64) -> f64 {
        let w = std::f64::consts::TAU * f / rate;
        let z1 = (w.cos(), -w.sin());
        let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0, self.b[1] * z1.1 + self.b[2] * z2.1);
        let den = (1.0 + self.a[0] * z1.0 + self.a[1] * z2.0, self.a[0] * z1.1 + self.a[1] * z2.1);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

pub const BAND_LOW_HZ: f64 = 0.4;
pub const BAND_HIGH_HZ: f64 = 8.0;

/// Fourth-order Butterworth band-pass (two second-order sections) run
/// forward then backward for zero phase. Edges are padded by odd
/// reflection to limit start-up transients.
#[derive(Clone, Debug)]
pub struct Bandpass {
    sections: [Biquad; 2],
    rate: f64,
}

impl Bandpass {
    pub fn new(low_hz: f64, high_hz: f64, rate: f64) -> Self {
        Self { sections: [Biquad::butterworth(low_hz, rate, true), Biquad::butterworth(high_hz, rate, false)], rate }
    }

    /// Magnitude of the zero-phase (forward-backward) response at `f` Hz.
    pub fn zero_phase_gain(&self, f: f64) -> f64 {
        self.sections.iter().map(|s| s.gain(f, self.rate).powi(2)).product()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = ((3.0 * self.rate) as usize).min(n - 1);
        let mut buf = Vec::with_capacity(n + 2 * pad);
        buf.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        buf.extend_from_slice(x);
        buf.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        for s in &self.sections {
            s.run(&mut buf);
        }
        buf.reverse();
        for s in &self.sections {
            s.run(&mut buf);
        }
        buf.reverse();
        buf[pad..pad + n].to_vec()
    }
}

/// Band-pass, decimate to `out_rate`, then z-score each channel over the
/// window with the population std. `raw` is `channels x n` row-major.
pub fn preprocess(raw: &[f64], channels: usize, rate: f64, out_rate: f64) -> Result<Vec<f32>> {
    if channels == 0 || raw.len() % channels != 0 {
        return Err(CoreError::InvalidArgument("raw length is not a multiple of the channel count".into()));
    }
    let factor = rate / out_rate;
    if factor < 1.0 || (factor - factor.round()).abs() > 1e-9 {
        return Err(CoreError::InvalidArgument(format!("cannot decimate {rate} Hz to {out_rate} Hz")));
    }
    let factor = factor.round() as usize;
    let n = raw.len() / channels;
    let filter = Bandpass::new(BAND_LOW_HZ, BAND_HIGH_HZ, rate);
    let mut out = Vec::with_capacity(channels * n.div_ceil(factor));
    for c in 0..channels {
        let ch = &raw[c * n..(c + 1) * n];
        let (lo, hi) = ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if hi - lo <= 0.0 {
            return Err(CoreError::ZeroVariance { channel: c });
        }
        let y: Vec<f64> = filter.apply(ch).into_iter().step_by(factor).collect();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let sd = std_of(&y);
        if !(sd > 1e-12) {
            return Err(CoreError::ZeroVariance { channel: c });
        }
        out.extend(y.iter().map(|v| ((v - m) / sd) as f32));
    }
    Ok(out)
}

/// One preprocessed paired recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPair {
    pub participant_id: u32,
    pub segment_id: u32,
    /// `PPG_CHANNELS x T` row-major.
    pub ppg: Vec<f32>,
    /// `ACCEL_CHANNELS x T` row-major.
    pub accel: Vec<f32>,
    pub rr: Vec<f64>,
    pub labels: Labels,
}

/// Generates the segment for one `(participant, segment)` cell from its
/// own random stream.
pub fn gen_segment(cfg: &SynthConfig, profile: &ParticipantProfile, segment_id: u32) -> Result<SegmentPair> {
    let rng = &mut cell_rng(cfg.seed, profile.participant_id, segment_id);
    let rr = gen_rr_sequence(profile, cfg.duration_s, cfg.ar_coeff, rng);
    let labels = labels_from_rr(&rr)?;
    let ppg_raw = synth_ppg(&rr, profile, cfg, rng);
    let accel_raw = synth_accel(&rr, profile, cfg, rng);
    let ppg = preprocess(&ppg_raw, PPG_CHANNELS, cfg.raw_rate_hz, cfg.out_rate_hz)?;
    let accel = preprocess(&accel_raw, ACCEL_CHANNELS, cfg.raw_rate_hz, cfg.out_rate_hz)?;
    Ok(SegmentPair { participant_id: profile.participant_id, segment_id, ppg, accel, rr, labels })
}
