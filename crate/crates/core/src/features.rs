//! Neural and movement feature extraction.
//!
//! Neural features: the last second of multichannel signal is transformed by
//! a complex Morlet wavelet per frequency bin; magnitudes are block-averaged
//! down to `t_dec` points, giving a `t_dec x n_freq x n_channels` tensor.
//!
//! Movement features: the optimal increment from the effector toward the
//! current target, restricted to the active state's limb.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::sim::effector::{angle_difference, clip_norm, EffectorState, Limb, StateLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: f64,
    pub n_channels: usize,
    /// Wavelet center frequencies in Hz.
    pub freqs: Vec<f64>,
    #[serde(default = "default_epoch")]
    pub epoch_s: f64,
    #[serde(default = "default_slide")]
    pub slide_s: f64,
    /// Points kept per epoch after decimation.
    pub t_dec: usize,
    #[serde(default = "default_cycles")]
    pub morlet_cycles: f64,
}

fn default_epoch() -> f64 {
    1.0
}

fn default_slide() -> f64 {
    0.1
}

fn default_cycles() -> f64 {
    7.0
}

/// `start, start + step, ..., stop` inclusive.
pub fn frequency_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).round() as usize + 1;
    (0..n).map(|i| start + step * i as f64).collect()
}

impl FeatureConfig {
    /// 586 Hz, 64 channels, 10..150 Hz in 10 Hz steps, 10 points per epoch.
    pub fn clinical() -> Self {
        Self {
            sample_rate: 586.0,
            n_channels: 64,
            freqs: frequency_grid(10.0, 150.0, 10.0),
            epoch_s: 1.0,
            slide_s: 0.1,
            t_dec: 10,
            morlet_cycles: 7.0,
        }
    }

    /// Reduced configuration for fast simulation: 200 Hz, 8 channels,
    /// 10..60 Hz, 5 points per epoch.
    pub fn desk() -> Self {
        Self {
            sample_rate: 200.0,
            n_channels: 8,
            freqs: frequency_grid(10.0, 60.0, 10.0),
            epoch_s: 1.0,
            slide_s: 0.1,
            t_dec: 5,
            morlet_cycles: 7.0,
        }
    }

    pub fn window_len(&self) -> usize {
        (self.epoch_s * self.sample_rate).round() as usize
    }

    /// Samples between consecutive epochs (rounded).
    pub fn slide_len(&self) -> usize {
        (self.slide_s * self.sample_rate).round() as usize
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.t_dec, self.freqs.len(), self.n_channels]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) || self.n_channels == 0 || self.t_dec == 0 || self.freqs.is_empty() {
            return Err(arg_err!("feature config needs positive rate, channels, t_dec and frequencies"));
        }
        let nyquist = self.sample_rate / 2.0;
        if let Some(f) = self.freqs.iter().find(|&&f| !(f > 0.0 && f < nyquist)) {
            return Err(arg_err!("frequency {f} Hz outside (0, Nyquist = {nyquist} Hz)"));
        }
        if self.window_len() < self.t_dec {
            return Err(arg_err!("epoch of {} samples cannot be decimated to {} points", self.window_len(), self.t_dec));
        }
        if !(self.morlet_cycles > 0.0) {
            return Err(arg_err!("Morlet cycle count must be positive"));
        }
        Ok(())
    }
}

/// A `samples x channels` block of raw signal, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub n_samples: usize,
    pub n_channels: usize,
    pub data: Vec<f64>,
}

impl RawWindow {
    pub fn zeros(n_samples: usize, n_channels: usize) -> Self {
        Self { n_samples, n_channels, data: vec![0.0; n_samples * n_channels] }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_channels..(i + 1) * self.n_channels]
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_samples).map(move |i| self.data[i * self.n_channels + c])
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { data: self.data.iter().map(|v| v * a).collect(), ..self.clone() }
    }
}

/// The window of `window_len` samples ending at time `t` (seconds) of a
/// recorded stream whose first sample is at time 0.
pub fn epoch(stream: &[Vec<f64>], cfg: &FeatureConfig, t: f64) -> Result<RawWindow> {
    let n = cfg.window_len();
    let end = (t * cfg.sample_rate).round();
    if end < n as f64 {
        return Err(Error::NotReady(format!("{t} s holds less than one epoch of history")));
    }
    let end = end as usize;
    if end > stream.len() {
        return Err(Error::NotReady(format!("stream ends before {t} s")));
    }
    let mut data = Vec::with_capacity(n * cfg.n_channels);
    for frame in &stream[end - n..end] {
        if frame.len() != cfg.n_channels {
            return Err(arg_err!("frame with {} channels, expected {}", frame.len(), cfg.n_channels));
        }
        data.extend_from_slice(frame);
    }
    Ok(RawWindow { n_samples: n, n_channels: cfg.n_channels, data })
}

/// Rolling buffer that always holds the most recent epoch.
#[derive(Debug, Clone)]
pub struct EpochBuffer {
    capacity: usize,
    n_channels: usize,
    frames: VecDeque<Vec<f64>>,
}

impl EpochBuffer {
    pub fn new(cfg: &FeatureConfig) -> Self {
        Self { capacity: cfg.window_len(), n_channels: cfg.n_channels, frames: VecDeque::with_capacity(cfg.window_len()) }
    }

    pub fn push(&mut self, frame: Vec<f64>) -> Result<()> {
        if frame.len() != self.n_channels {
            return Err(arg_err!("frame with {} channels, expected {}", frame.len(), self.n_channels));
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    pub fn is_ready(&self) -> bool {
        self.frames.len() == self.capacity
    }

    pub fn window(&self) -> Result<RawWindow> {
        if !self.is_ready() {
            return Err(Error::NotReady(format!("{} of {} samples buffered", self.frames.len(), self.capacity)));
        }
        let mut data = Vec::with_capacity(self.capacity * self.n_channels);
        for f in &self.frames {
            data.extend_from_slice(f);
        }
        Ok(RawWindow { n_samples: self.capacity, n_channels: self.n_channels, data })
    }
}

/// Precomputed complex Morlet filter bank for one window length.
///
/// Each wavelet is `exp(-t^2 / 2 s^2) exp(2 pi i f t)` with
/// `s = cycles / (2 pi f)`, truncated at 3.5 s and scaled so a
/// unit-amplitude sinusoid at `f` has magnitude close to 1. Convolution is
/// linear with zero padding, evaluated by FFT.
pub struct CcwtExtractor {
    cfg: FeatureConfig,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Spectrum of each wavelet, pre-divided by the FFT length.
    kernels: Vec<Vec<Complex64>>,
    /// Decimation block boundaries.
    blocks: Vec<(usize, usize)>,
}

impl std::fmt::Debug for CcwtExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CcwtExtractor").field("cfg", &self.cfg).field("fft_len", &self.fft_len).finish()
    }
}

impl CcwtExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_len();
        let fs = cfg.sample_rate;
        let half_lens: Vec<usize> = cfg
            .freqs
            .iter()
            .map(|f| {
                let sigma = cfg.morlet_cycles / (2.0 * PI * f);
                ((3.5 * sigma * fs).ceil() as usize).min(n)
            })
            .collect();
        let max_half = half_lens.iter().copied().max().unwrap_or(0);
        let fft_len = (n + max_half).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);

        let kernels = cfg
            .freqs
            .iter()
            .zip(&half_lens)
            .map(|(&f, &h)| {
                let sigma = cfg.morlet_cycles / (2.0 * PI * f);
                let mut k = vec![Complex64::new(0.0, 0.0); fft_len];
                let mut envelope_sum = 0.0;
                for m in -(h as isize)..=(h as isize) {
                    let t = m as f64 / fs;
                    let g = (-t * t / (2.0 * sigma * sigma)).exp();
                    envelope_sum += g;
                    k[m.rem_euclid(fft_len as isize) as usize] = Complex64::from_polar(g, 2.0 * PI * f * t);
                }
                let scale = 2.0 / envelope_sum / fft_len as f64;
                for v in &mut k {
                    *v *= scale;
                }
                forward.process(&mut k);
                k
            })
            .collect();
        let blocks = (0..cfg.t_dec).map(|b| (b * n / cfg.t_dec, (b + 1) * n / cfg.t_dec)).collect();
        Ok(Self { cfg: cfg.clone(), fft_len, forward, inverse, kernels, blocks })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Magnitude scalogram of one channel: `n_freq` series of window length.
    pub fn scalogram(&self, signal: impl Iterator<Item = f64>) -> Vec<Vec<f64>> {
        let n = self.cfg.window_len();
        let mut spec: Vec<Complex64> = signal.map(|v| Complex64::new(v, 0.0)).collect();
        spec.resize(self.fft_len, Complex64::new(0.0, 0.0));
        self.forward.process(&mut spec);
        self.kernels
            .iter()
            .map(|kernel| {
                let mut prod: Vec<Complex64> = spec.iter().zip(kernel).map(|(a, b)| a * b).collect();
                self.inverse.process(&mut prod);
                prod[..n].iter().map(|c| c.norm()).collect()
            })
            .collect()
    }

    /// `t_dec x n_freq x n_channels` feature tensor of one epoch.
    pub fn features(&self, window: &RawWindow) -> Result<Tensor> {
        let [t_dec, n_freq, n_ch] = self.cfg.shape();
        if window.n_samples != self.cfg.window_len() || window.n_channels != n_ch {
            return Err(arg_err!(
                "window {}x{}, expected {}x{}",
                window.n_samples,
                window.n_channels,
                self.cfg.window_len(),
                n_ch
            ));
        }
        let mut out = vec![0.0; t_dec * n_freq * n_ch];
        for c in 0..n_ch {
            for (fi, series) in self.scalogram(window.channel(c)).iter().enumerate() {
                for (b, &(lo, hi)) in self.blocks.iter().enumerate() {
                    let mean = series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                    out[(b * n_freq + fi) * n_ch + c] = mean;
                }
            }
        }
        Tensor::new(vec![t_dec, n_freq, n_ch], out)
    }
}

/// Convenience wrapper building a one-off extractor.
pub fn ccwt_features(window: &RawWindow, cfg: &FeatureConfig) -> Result<Tensor> {
    CcwtExtractor::new(cfg)?.features(window)
}

/// The current goal of the active limb.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    None,
    Point { limb: Limb, pos: [f64; 3] },
    Angle { limb: Limb, deg: f64 },
}

impl Target {
    pub fn limb(&self) -> Option<Limb> {
        match *self {
            Target::None => None,
            Target::Point { limb, .. } | Target::Angle { limb, .. } => Some(limb),
        }
    }

    /// Distance from the effector to this target (meters or degrees).
    pub fn distance(&self, e: &EffectorState) -> Option<f64> {
        match *self {
            Target::None => None,
            Target::Point { limb, pos } => {
                let p = e.position(limb)?;
                Some((0..3).map(|i| (pos[i] - p[i]).powi(2)).sum::<f64>().sqrt())
            }
            Target::Angle { limb, deg } => Some(angle_difference(e.angle(limb)?, deg).abs()),
        }
    }
}

/// Optimal movement and state label of one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSample {
    pub y: Vec<f64>,
    pub z: usize,
}

/// Optimal increment toward `target` for the limb of `state`.
///
/// With `clip` set, translations are capped at the effector's `max_speed`
/// and rotations at `max_angular_speed`.
pub fn output_features(
    effector: &EffectorState,
    target: &Target,
    state: usize,
    layout: &StateLayout,
    clip: bool,
) -> Result<OutputSample> {
    if state >= layout.k() {
        return Err(arg_err!("state {state} outside 0..{}", layout.k()));
    }
    let mut y = vec![0.0; layout.output_dim];
    let Some(limb) = layout.limb(state) else {
        return Ok(OutputSample { y, z: state });
    };
    if target.limb().is_some_and(|l| l != limb) {
        return Err(arg_err!("target for {:?} given in a {limb:?} state", target.limb()));
    }
    let comps = limb.components(layout.output_dim)?;
    match *target {
        Target::None => {}
        Target::Point { pos, .. } => {
            let cur = effector.position(limb).ok_or_else(|| arg_err!("{limb:?} has no position"))?;
            let mut d: Vec<f64> = (0..3).map(|i| pos[i] - cur[i]).collect();
            if clip {
                clip_norm(&mut d, effector.max_speed);
            }
            for (c, v) in comps.iter().zip(d) {
                y[*c] = v;
            }
        }
        Target::Angle { deg, .. } => {
            let cur = effector.angle(limb).ok_or_else(|| arg_err!("{limb:?} has no angle"))?;
            let mut d = angle_difference(cur, deg);
            if clip {
                d = d.clamp(-effector.max_angular_speed, effector.max_angular_speed);
            }
            y[comps[0]] = d;
        }
    }
    Ok(OutputSample { y, z: state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::effector::Bounds;

    fn sinusoid(cfg: &FeatureConfig, freq: f64, channel: usize) -> RawWindow {
        let n = cfg.window_len();
        let mut w = RawWindow::zeros(n, cfg.n_channels);
        for i in 0..n {
            w.data[i * cfg.n_channels + channel] = (2.0 * PI * freq * i as f64 / cfg.sample_rate).sin();
        }
        w
    }

    /// Naive DFT magnitude of a real series at an arbitrary frequency.
    fn dft_magnitude(x: &[f64], freq: f64, fs: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = -2.0 * PI * freq * i as f64 / fs;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        (re * re + im * im).sqrt()
    }

    fn argmax(v: &[f64]) -> usize {
        crate::gating::argmax(v)
    }

    #[test]
    fn clinical_epoch_has_586_samples() {
        let cfg = FeatureConfig::clinical();
        let stream = vec![vec![0.0; 64]; 1000];
        let w = epoch(&stream, &cfg, 1.5).unwrap();
        assert_eq!((w.n_samples, w.n_channels), (586, 64));
    }

    #[test]
    fn consecutive_epochs_overlap_ninety_percent() {
        let cfg = FeatureConfig::desk();
        let stream: Vec<Vec<f64>> = (0..600).map(|i| vec![i as f64; 8]).collect();
        let a = epoch(&stream, &cfg, 2.0).unwrap();
        let b = epoch(&stream, &cfg, 2.1).unwrap();
        let first_b = b.sample(0)[0];
        let shared = a.channel(0).filter(|v| *v >= first_b).count();
        assert_eq!(shared, 180);
        assert_eq!(shared as f64 / a.n_samples as f64, 0.9);
        let clinical = FeatureConfig::clinical();
        assert!((clinical.window_len() - clinical.slide_len()) as f64 / clinical.window_len() as f64 - 0.9 < 0.002);
    }

    #[test]
    fn epoch_before_history_is_not_ready() {
        let cfg = FeatureConfig::desk();
        let stream = vec![vec![0.0; 8]; 600];
        assert!(matches!(epoch(&stream, &cfg, 0.5), Err(Error::NotReady(_))));
        let mut buf = EpochBuffer::new(&cfg);
        buf.push(vec![0.0; 8]).unwrap();
        assert!(matches!(buf.window(), Err(Error::NotReady(_))));
    }

    #[test]
    fn epoch_buffer_matches_stream_epoch() {
        let cfg = FeatureConfig::desk();
        let stream: Vec<Vec<f64>> = (0..450).map(|i| (0..8).map(|c| (i * 8 + c) as f64).collect()).collect();
        let mut buf = EpochBuffer::new(&cfg);
        for f in &stream[..420] {
            buf.push(f.clone()).unwrap();
        }
        assert_eq!(buf.window().unwrap(), epoch(&stream, &cfg, 2.1).unwrap());
    }

    #[test]
    fn zero_window_gives_zero_features() {
        let cfg = FeatureConfig::desk();
        let f = ccwt_features(&RawWindow::zeros(200, 8), &cfg).unwrap();
        assert_eq!(f.shape(), &[5, 6, 8]);
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn clinical_shape() {
        let cfg = FeatureConfig::clinical();
        let f = ccwt_features(&RawWindow::zeros(586, 64), &cfg).unwrap();
        assert_eq!(f.shape(), &[10, 15, 64]);
    }

    #[test]
    fn fifty_hertz_peaks_at_fifty_hertz_bin() {
        for cfg in [FeatureConfig::clinical(), FeatureConfig::desk()] {
            let w = sinusoid(&cfg, 50.0, 2);
            let f = ccwt_features(&w, &cfg).unwrap();
            let [t_dec, n_freq, n_ch] = cfg.shape();
            let profile: Vec<f64> = (0..n_freq)
                .map(|fi| (0..t_dec).map(|b| f.get(&[b, fi, 2]).unwrap()).sum())
                .collect();
            let oracle: Vec<f64> = cfg
                .freqs
                .iter()
                .map(|&fr| dft_magnitude(&w.channel(2).collect::<Vec<_>>(), fr, cfg.sample_rate))
                .collect();
            assert_eq!(cfg.freqs[argmax(&profile)], 50.0);
            assert_eq!(argmax(&profile), argmax(&oracle));
            for c in (0..n_ch).filter(|&c| c != 2) {
                assert!((0..t_dec).all(|b| (0..n_freq).all(|fi| f.get(&[b, fi, c]).unwrap().abs() < 1e-9)));
            }
            // amplitude calibration away from the edges
            let mid = f.get(&[t_dec / 2, argmax(&profile), 2]).unwrap();
            assert!((mid - 1.0).abs() < 0.05, "mid-epoch magnitude {mid}");
        }
    }

    #[test]
    fn features_are_positively_homogeneous_and_ordered() {
        let cfg = FeatureConfig::desk();
        let mut w = sinusoid(&cfg, 30.0, 0);
        for (i, v) in w.data.iter_mut().enumerate() {
            *v += ((i * 7919) % 13) as f64 / 13.0 - 0.5;
        }
        let ex = CcwtExtractor::new(&cfg).unwrap();
        let base = ex.features(&w).unwrap();
        let scaled = ex.features(&w.scaled(2.5)).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((2.5 * a - b).abs() < 1e-9);
            if *a > 0.0 {
                assert!(b > a);
            }
        }
        assert!(base.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn rejects_frequency_above_nyquist() {
        let mut cfg = FeatureConfig::desk();
        cfg.freqs.push(120.0);
        assert!(matches!(CcwtExtractor::new(&cfg), Err(Error::Argument(_))));
    }

    fn effector() -> EffectorState {
        let b = Bounds { min: [-2.0; 3], max: [2.0; 3] };
        EffectorState {
            left_pos: [0.0; 3],
            right_pos: [0.0; 3],
            left_angle: 170.0,
            right_angle: 0.0,
            left_bounds: b,
            right_bounds: b,
            max_speed: 0.5,
            max_angular_speed: 30.0,
        }
    }

    #[test]
    fn translation_target_difference() {
        let t = Target::Point { limb: Limb::LeftHand, pos: [1.0, 0.0, 0.0] };
        let s = output_features(&effector(), &t, 1, &StateLayout::three_state(), false).unwrap();
        assert_eq!(s.y, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let s = output_features(&effector(), &t, 1, &StateLayout::three_state(), true).unwrap();
        assert_eq!(s.y[0], 0.5);
    }

    #[test]
    fn idle_state_has_zero_output() {
        let s = output_features(&effector(), &Target::None, 0, &StateLayout::three_state(), true).unwrap();
        assert_eq!(s, OutputSample { y: vec![0.0; 6], z: 0 });
    }

    #[test]
    fn wrist_difference_takes_shortest_arc() {
        let t = Target::Angle { limb: Limb::LeftWrist, deg: -170.0 };
        let s = output_features(&effector(), &t, 3, &StateLayout::five_state(), false).unwrap();
        assert_eq!(s.y[3], 20.0);
        // brute-force oracle: smallest |d| with cur + d == target (mod 360)
        for cur in [-179.0, -90.0, 0.0, 45.5, 179.0] {
            for tgt in [-180.0, -1.0, 0.0, 90.0, 179.9] {
                let best = (-720..=720)
                    .map(|k| tgt - cur + 360.0 * k as f64)
                    .filter(|d: &f64| (-180.0..180.0).contains(d))
                    .next()
                    .unwrap();
                assert!((angle_difference(cur, tgt) - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mismatched_target_limb_is_rejected() {
        let t = Target::Point { limb: Limb::RightHand, pos: [1.0; 3] };
        assert!(output_features(&effector(), &t, 1, &StateLayout::three_state(), true).is_err());
    }
}
