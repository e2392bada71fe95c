//! The REW-MSLM decoder: K per-state multilinear experts mixed by HMM gating.
//!
//! Each state owns a disjoint subset of the continuous output components
//! (its mask). Expert `k` regresses only those components and contributes
//! zeros elsewhere; a state with an empty mask (idle) is the constant zero
//! map. The mixture is `y_hat = sum_k gamma_k * expert_k(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::gating::{argmax, HmmGating, PriorSource};
use crate::npls::{NplsModelSet, DEFAULT_F_MAX};
use crate::tensor::{frobenius_distance, Tensor};

/// How gating weights are formed from the classifier posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// HMM forward recursion over the posterior (REW-MSLM).
    #[default]
    Hmm,
    /// The softmax posterior used directly (REW-SLM).
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Owned output components per state; `masks.len()` is K.
    pub masks: Vec<Vec<usize>>,
    pub output_dim: usize,
    #[serde(default = "default_f_max")]
    pub f_max: usize,
    /// Per-expert forgetting factors; a single entry applies to all.
    #[serde(default = "default_lambdas")]
    pub lambda_experts: Vec<f64>,
    /// Forgetting factor of the gating classifier and transition counts.
    #[serde(default = "default_lambda")]
    pub lambda_gating: f64,
    /// Initial state distribution; uniform when absent.
    #[serde(default)]
    pub pi: Option<Vec<f64>>,
    #[serde(default)]
    pub gating_mode: GatingMode,
    #[serde(default)]
    pub prior_source: PriorSource,
}

fn default_f_max() -> usize {
    DEFAULT_F_MAX
}

fn default_lambda() -> f64 {
    1.0
}

fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}

impl DecoderConfig {
    /// Idle, left-hand and right-hand translation (6D output).
    pub fn three_state() -> Self {
        Self::with_masks(vec![vec![], vec![0, 1, 2], vec![3, 4, 5]], 6)
    }

    /// Idle, both hand translations and both wrist rotations (8D output:
    /// left xyz, left wrist, right xyz, right wrist).
    pub fn five_state() -> Self {
        Self::with_masks(vec![vec![], vec![0, 1, 2], vec![4, 5, 6], vec![3], vec![7]], 8)
    }

    pub fn with_masks(masks: Vec<Vec<usize>>, output_dim: usize) -> Self {
        Self {
            masks,
            output_dim,
            f_max: DEFAULT_F_MAX,
            lambda_experts: default_lambdas(),
            lambda_gating: 1.0,
            pi: None,
            gating_mode: GatingMode::Hmm,
            prior_source: PriorSource::LabelFrequency,
        }
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    fn lambda_for(&self, k: usize) -> f64 {
        match self.lambda_experts.as_slice() {
            [single] => *single,
            many => many.get(k).copied().unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.masks.is_empty() {
            return Err(arg_err!("decoder needs at least one state"));
        }
        if self.lambda_experts.len() != 1 && self.lambda_experts.len() != self.k() {
            return Err(arg_err!(
                "lambda_experts needs 1 or {} entries, got {}",
                self.k(),
                self.lambda_experts.len()
            ));
        }
        let mut owner = vec![None; self.output_dim];
        for (k, mask) in self.masks.iter().enumerate() {
            for &c in mask {
                let slot = owner
                    .get_mut(c)
                    .ok_or_else(|| arg_err!("state {k} owns component {c} >= output_dim {}", self.output_dim))?;
                if let Some(prev) = *slot {
                    return Err(arg_err!("component {c} owned by states {prev} and {k}"));
                }
                *slot = Some(k);
            }
        }
        Ok(())
    }
}

/// Output of one decode tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub y_hat: Vec<f64>,
    pub gamma: Vec<f64>,
    pub state: usize,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MslmDecoder {
    config: DecoderConfig,
    x_shape: Vec<usize>,
    experts: Vec<Option<NplsModelSet>>,
    gating: HmmGating,
    updates: u64,
    /// Per state: Frobenius distance between the selected expert model
    /// before and after each update that touched it.
    convergence: Vec<Vec<f64>>,
}

impl MslmDecoder {
    /// Zero-initialized decoder for features of shape `x_shape`.
    pub fn new(config: DecoderConfig, x_shape: &[usize]) -> Result<Self> {
        config.validate()?;
        let experts = config
            .masks
            .iter()
            .enumerate()
            .map(|(k, mask)| {
                if mask.is_empty() {
                    Ok(None)
                } else {
                    NplsModelSet::new(x_shape, &[mask.len()], config.f_max, config.lambda_for(k)).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gating = HmmGating::new(config.k(), x_shape, config.f_max, config.lambda_gating, config.lambda_gating)?
            .with_prior_source(config.prior_source);
        if let Some(pi) = &config.pi {
            gating = gating.with_initial(pi.clone())?;
        }
        Ok(Self {
            x_shape: x_shape.to_vec(),
            convergence: vec![Vec::new(); config.k()],
            experts,
            gating,
            updates: 0,
            config,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn x_shape(&self) -> &[usize] {
        &self.x_shape
    }

    pub fn masks(&self) -> &[Vec<usize>] {
        &self.config.masks
    }

    pub fn expert(&self, k: usize) -> Option<&NplsModelSet> {
        self.experts.get(k).and_then(Option::as_ref)
    }

    pub fn gating(&self) -> &HmmGating {
        &self.gating
    }

    pub fn gating_mut(&mut self) -> &mut HmmGating {
        &mut self.gating
    }

    pub fn gating_mode(&self) -> GatingMode {
        self.config.gating_mode
    }

    pub fn set_gating_mode(&mut self, mode: GatingMode) {
        self.config.gating_mode = mode;
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn convergence(&self) -> &[Vec<f64>] {
        &self.convergence
    }

    /// Expert `k`'s prediction expanded to the full output vector.
    pub fn expert_output(&self, k: usize, x: &Tensor) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        if let Some(expert) = self.expert(k) {
            let pred = expert.predict(x, None)?;
            for (&c, v) in self.config.masks[k].iter().zip(pred.data()) {
                out[c] = *v;
            }
        }
        Ok(out)
    }

    /// Mixes expert outputs with the given gating weights.
    pub fn mix(&self, gamma: &[f64], x: &Tensor) -> Result<Vec<f64>> {
        if gamma.len() != self.k() {
            return Err(arg_err!("gamma has {} weights for {} states", gamma.len(), self.k()));
        }
        let mut y = vec![0.0; self.output_dim()];
        for (k, &g) in gamma.iter().enumerate() {
            if self.experts[k].is_none() {
                continue;
            }
            for (acc, v) in y.iter_mut().zip(self.expert_output(k, x)?) {
                *acc += g * v;
            }
        }
        Ok(y)
    }

    /// Decodes one feature tensor against an externally owned belief.
    pub fn decode_with(&self, x: &Tensor, belief: &mut Vec<f64>) -> Result<DecodeResult> {
        if x.shape() != self.x_shape.as_slice() {
            return Err(arg_err!("feature shape {:?}, expected {:?}", x.shape(), self.x_shape));
        }
        let posterior = self.gating.classify(x)?;
        let gamma = match self.config.gating_mode {
            GatingMode::Hmm => self.gating.forward_from(belief, &posterior)?,
            GatingMode::Static => posterior.clone(),
        };
        *belief = gamma.clone();
        let y_hat = self.mix(&gamma, x)?;
        Ok(DecodeResult { state: argmax(&gamma), y_hat, gamma, posterior })
    }

    /// Decodes one feature tensor, advancing the decoder's own belief.
    pub fn decode(&mut self, x: &Tensor) -> Result<DecodeResult> {
        let mut belief = self.gating.gamma().to_vec();
        let out = self.decode_with(x, &mut belief)?;
        self.gating.set_gamma(belief)?;
        Ok(out)
    }

    /// One calibration update on an aligned block.
    ///
    /// Every expert whose state occurs in the block is validated on its
    /// sub-block (Recursive-Validation) and then trained on it with its
    /// masked targets; the gating classifier and transition counts are
    /// updated on the full block. Experts of absent states are untouched.
    pub fn calibrate_update(&mut self, xs: &[Tensor], ys: &[Vec<f64>], zs: &[usize]) -> Result<()> {
        if xs.len() != ys.len() || xs.len() != zs.len() {
            return Err(arg_err!(
                "misaligned block: {} inputs, {} outputs, {} labels",
                xs.len(),
                ys.len(),
                zs.len()
            ));
        }
        if xs.is_empty() {
            return Err(arg_err!("empty calibration block"));
        }
        if let Some(&z) = zs.iter().find(|&&z| z >= self.k()) {
            return Err(arg_err!("state label {z} outside 0..{}", self.k()));
        }
        if let Some(y) = ys.iter().find(|y| y.len() != self.output_dim()) {
            return Err(arg_err!("output vector of length {}, expected {}", y.len(), self.output_dim()));
        }

        // Validate every sub-block before touching any model so a bad block
        // leaves the decoder unchanged.
        let mut staged = self.clone();
        for k in 0..self.k() {
            let Some(expert) = staged.experts[k].as_mut() else { continue };
            let idx: Vec<usize> = (0..zs.len()).filter(|&i| zs[i] == k).collect();
            if idx.is_empty() {
                continue;
            }
            let mask = &self.config.masks[k];
            let sub_x: Vec<Tensor> = idx.iter().map(|&i| xs[i].clone()).collect();
            let sub_y = idx
                .iter()
                .map(|&i| Tensor::vector(mask.iter().map(|&c| ys[i][c]).collect()))
                .collect::<Result<Vec<_>>>()?;
            let before = expert.selected().beta.clone();
            expert.rv_select(&sub_x, &sub_y)?;
            expert.update(&sub_x, &sub_y)?;
            let dist = frobenius_distance(&before, &expert.selected().beta)?;
            staged.convergence[k].push(dist);
        }
        staged.gating.update(xs, zs)?;
        staged.updates += 1;
        // the live belief is owned by the decode path, not by training
        let gamma = self.gating.gamma().to_vec();
        *self = staged;
        self.gating.set_gamma(gamma)?;
        Ok(())
    }

    /// Adds a state owning `mask`; existing experts are preserved exactly.
    pub fn append_expert(&mut self, mask: Vec<usize>) -> Result<()> {
        let mut config = self.config.clone();
        config.masks.push(mask.clone());
        if config.lambda_experts.len() > 1 {
            config.lambda_experts.push(1.0);
        }
        if let Some(pi) = config.pi.as_mut() {
            pi.push(0.0);
        }
        config.validate()?;
        let k = config.k() - 1;
        let expert = if mask.is_empty() {
            None
        } else {
            Some(NplsModelSet::new(&self.x_shape, &[mask.len()], config.f_max, config.lambda_for(k))?)
        };
        self.gating.append_state()?;
        self.experts.push(expert);
        self.convergence.push(Vec::new());
        self.config = config;
        Ok(())
    }
}
