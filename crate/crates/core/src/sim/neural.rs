//! Synthetic state-dependent multichannel neural signal.
//!
//! Every channel is a sum of sinusoids at the feature grid's frequencies.
//! Their amplitudes are a baseline plus an additive per-state signature plus
//! a linear coupling to the intended movement, and white noise is added on
//! top. Each active state drives its own disjoint block of channels, so
//! state identity and intention are recoverable from the spectral features.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::features::FeatureConfig;
use crate::sim::effector::StateLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    /// Amplitude present in every channel and band.
    #[serde(default = "default_baseline")]
    pub baseline: f64,
    /// Extra amplitude in the active state's channels and upper bands.
    #[serde(default = "default_signature_gain")]
    pub signature_gain: f64,
    /// Standard deviation of the intention coupling weights.
    #[serde(default = "default_coupling")]
    pub coupling: f64,
    /// White-noise standard deviation per sample.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_baseline() -> f64 {
    1.0
}

fn default_signature_gain() -> f64 {
    1.0
}

fn default_coupling() -> f64 {
    0.25
}

fn default_noise() -> f64 {
    1.0
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            baseline: default_baseline(),
            signature_gain: default_signature_gain(),
            coupling: default_coupling(),
            noise: default_noise(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthNeuralModel {
    pub sample_rate: f64,
    pub n_channels: usize,
    pub freqs: Vec<f64>,
    /// `n_channels x n_freq`, row-major.
    pub baseline: Vec<f64>,
    /// Per state, `n_channels x n_freq` additive amplitude.
    pub signatures: Vec<Vec<f64>>,
    /// `(n_channels x n_freq) x output_dim` intention coupling.
    pub coupling: Vec<Vec<f64>>,
    pub noise: f64,
    pub phases: Vec<f64>,
}

impl SynthNeuralModel {
    /// Disjoint channel blocks per active state; each state's signature
    /// raises the upper half of the bands, and its intention couples to all
    /// bands of its own channels.
    pub fn new(cfg: &FeatureConfig, layout: &StateLayout, params: &GeneratorParams) -> Result<Self> {
        let n_ch = cfg.n_channels;
        let n_f = cfg.freqs.len();
        let active: Vec<usize> = (0..layout.k()).filter(|&s| layout.limb(s).is_some()).collect();
        if active.is_empty() || n_ch < active.len() {
            return Err(arg_err!("{n_ch} channels cannot host {} active states", active.len()));
        }
        let per_state = n_ch / active.len();
        let masks = layout.masks()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let coupling_dist = Normal::new(0.0, params.coupling.max(0.0)).map_err(|e| arg_err!("{e}"))?;

        let mut signatures = vec![vec![0.0; n_ch * n_f]; layout.k()];
        let mut coupling = vec![vec![0.0; layout.output_dim]; n_ch * n_f];
        for (slot, &s) in active.iter().enumerate() {
            for c in slot * per_state..(slot + 1) * per_state {
                for b in 0..n_f {
                    if b >= n_f / 2 {
                        signatures[s][c * n_f + b] = params.signature_gain;
                    }
                    for &d in &masks[s] {
                        coupling[c * n_f + b][d] = coupling_dist.sample(&mut rng);
                    }
                }
            }
        }
        let phases = (0..n_ch * n_f).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Ok(Self {
            sample_rate: cfg.sample_rate,
            n_channels: n_ch,
            freqs: cfg.freqs.clone(),
            baseline: vec![params.baseline; n_ch * n_f],
            signatures,
            coupling,
            noise: params.noise,
            phases,
        })
    }

    pub fn n_states(&self) -> usize {
        self.signatures.len()
    }

    /// Per channel/band amplitudes for a state and normalized intention.
    pub fn amplitudes(&self, state: usize, intention: &[f64]) -> Result<Vec<f64>> {
        let sig = self
            .signatures
            .get(state)
            .ok_or_else(|| arg_err!("state {state} outside 0..{}", self.n_states()))?;
        Ok(self
            .baseline
            .iter()
            .zip(sig)
            .zip(&self.coupling)
            .map(|((b, s), row)| b + s + row.iter().zip(intention).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    /// `n_samples` frames starting at absolute sample index `start`.
    ///
    /// Phases are tied to absolute time so consecutive calls produce a
    /// continuous signal.
    pub fn synth_neural<R: Rng + ?Sized>(
        &self,
        state: usize,
        intention: &[f64],
        start: u64,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let amps = self.amplitudes(state, intention)?;
        let n_f = self.freqs.len();
        let mut frames = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let t = (start + i as u64) as f64 / self.sample_rate;
            let frame = (0..self.n_channels)
                .map(|c| {
                    let mut v = 0.0;
                    for b in 0..n_f {
                        let k = c * n_f + b;
                        v += amps[k] * (2.0 * PI * self.freqs[b] * t + self.phases[k]).sin();
                    }
                    if self.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        v += self.noise * z;
                    }
                    v
                })
                .collect();
            frames.push(frame);
        }
        Ok(frames)
    }
}
