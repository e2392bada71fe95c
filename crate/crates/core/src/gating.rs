//! Discrete state gating: a discriminative REW-NPLS classifier whose softmax
//! posterior drives an HMM forward recursion.
//!
//! States are zero-based labels `0..K`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::npls::NplsModelSet;
use crate::tensor::Tensor;

/// Floor applied to class priors before the Bayes inversion.
pub const PRIOR_FLOOR: f64 = 1e-6;

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite classifier scores {scores:?}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// One-hot rows for zero-based labels.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    labels
        .iter()
        .map(|&z| {
            if z >= k {
                return Err(arg_err!("state label {z} outside 0..{k}"));
            }
            let mut row = vec![0.0; k];
            row[z] = 1.0;
            Ok(row)
        })
        .collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn normalize_rows(counts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = counts.len();
    counts
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter().map(|c| c / s).collect()
            } else {
                vec![1.0 / k as f64; k]
            }
        })
        .collect()
}

/// Estimate of the class priors `p(z)` used to invert the classifier
/// posterior into an emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// `lambda_g`-weighted label frequencies of the calibration blocks.
    #[default]
    LabelFrequency,
    /// `lambda_g`-weighted mean of the classifier's own softmax posterior
    /// over the calibration blocks. Consistent with the softmax scale, so a
    /// skewed label balance cannot outweigh a confident posterior.
    PosteriorMean,
}

/// HMM gating parameters plus the discriminative state classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmGating {
    k: usize,
    /// Row-stochastic, `a[i][j] = p(z_t = j | z_{t-1} = i)`.
    transition: Vec<Vec<f64>>,
    transition_counts: Vec<Vec<f64>>,
    pi: Vec<f64>,
    class_priors: Vec<f64>,
    label_counts: Vec<f64>,
    clf: NplsModelSet,
    gamma: Vec<f64>,
    lambda_g: f64,
    /// Last label of the previous block, so boundary transitions are counted.
    #[serde(default)]
    last_label: Option<usize>,
    #[serde(default)]
    prior_source: PriorSource,
    #[serde(default)]
    posterior_mass: Vec<f64>,
}

impl HmmGating {
    /// Cold-start gating: uniform `A`, uniform `pi` and priors, zero classifier.
    pub fn new(k: usize, x_shape: &[usize], f_max: usize, lambda_clf: f64, lambda_g: f64) -> Result<Self> {
        if k == 0 {
            return Err(arg_err!("gating needs at least one state"));
        }
        if !(0.0..=1.0).contains(&lambda_g) {
            return Err(arg_err!("gating forgetting factor {lambda_g} outside [0, 1]"));
        }
        let uniform = vec![1.0 / k as f64; k];
        Ok(Self {
            k,
            transition: vec![uniform.clone(); k],
            transition_counts: vec![vec![0.0; k]; k],
            pi: uniform.clone(),
            class_priors: uniform.clone(),
            label_counts: vec![0.0; k],
            clf: NplsModelSet::new(x_shape, &[k], f_max, lambda_clf)?,
            gamma: uniform,
            lambda_g,
            last_label: None,
            prior_source: PriorSource::LabelFrequency,
            posterior_mass: vec![0.0; k],
        })
    }

    pub fn with_prior_source(mut self, source: PriorSource) -> Self {
        self.prior_source = source;
        self
    }

    pub fn prior_source(&self) -> PriorSource {
        self.prior_source
    }

    pub fn with_initial(mut self, pi: Vec<f64>) -> Result<Self> {
        check_distribution(&pi, self.k, "initial distribution")?;
        self.gamma = pi.clone();
        self.pi = pi;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn transition_counts(&self) -> &[Vec<f64>] {
        &self.transition_counts
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn class_priors(&self) -> &[f64] {
        &self.class_priors
    }

    pub fn classifier(&self) -> &NplsModelSet {
        &self.clf
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn lambda_g(&self) -> f64 {
        self.lambda_g
    }

    /// Resets the belief to `pi`.
    pub fn reset_belief(&mut self) {
        self.gamma = self.pi.clone();
    }

    pub fn set_gamma(&mut self, gamma: Vec<f64>) -> Result<()> {
        check_distribution(&gamma, self.k, "belief")?;
        self.gamma = gamma;
        Ok(())
    }

    /// Overrides the transition matrix (counts are left untouched).
    pub fn set_transition(&mut self, a: Vec<Vec<f64>>) -> Result<()> {
        if a.len() != self.k {
            return Err(arg_err!("transition matrix needs {} rows", self.k));
        }
        for row in &a {
            check_distribution(row, self.k, "transition row")?;
        }
        self.transition = a;
        Ok(())
    }

    pub fn set_class_priors(&mut self, priors: Vec<f64>) -> Result<()> {
        check_distribution(&priors, self.k, "class priors")?;
        self.class_priors = floor_and_normalize(&priors);
        Ok(())
    }

    /// Forgets the last seen label, e.g. at a session boundary.
    pub fn break_sequence(&mut self) {
        self.last_label = None;
    }

    /// Decays the transition and label counts by `lambda_g`, adds the
    /// block's counts (including the pair that crosses from the previous
    /// block) and renormalizes `A` and the class priors.
    pub fn update_transitions(&mut self, labels: &[usize]) -> Result<()> {
        if let Some(&z) = labels.iter().find(|&&z| z >= self.k) {
            return Err(arg_err!("state label {z} outside 0..{}", self.k));
        }
        for row in &mut self.transition_counts {
            for c in row.iter_mut() {
                *c *= self.lambda_g;
            }
        }
        for c in &mut self.label_counts {
            *c *= self.lambda_g;
        }
        if let (Some(prev), Some(&first)) = (self.last_label, labels.first()) {
            self.transition_counts[prev][first] += 1.0;
        }
        for pair in labels.windows(2) {
            self.transition_counts[pair[0]][pair[1]] += 1.0;
        }
        if let Some(&last) = labels.last() {
            self.last_label = Some(last);
        }
        for &z in labels {
            self.label_counts[z] += 1.0;
        }
        self.transition = normalize_rows(&self.transition_counts);
        let total: f64 = self.label_counts.iter().sum();
        if total > 0.0 {
            let freq: Vec<f64> = self.label_counts.iter().map(|c| c / total).collect();
            self.class_priors = floor_and_normalize(&freq);
        }
        Ok(())
    }

    /// Raw classifier scores `B x + b` with the validated latent dimension.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.clf.predict(x, None)?.into_data())
    }

    /// Softmax posterior `p(z_t | x_t)`.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<f64>> {
        softmax(&self.scores(x)?)
    }

    /// One forward step from an explicit previous belief; does not touch
    /// the stored belief.
    pub fn forward_from(&self, prev: &[f64], posterior: &[f64]) -> Result<Vec<f64>> {
        if prev.len() != self.k || posterior.len() != self.k {
            return Err(arg_err!("forward step expects {} states", self.k));
        }
        let predicted: Vec<f64> = (0..self.k)
            .map(|j| (0..self.k).map(|i| self.transition[i][j] * prev[i]).sum())
            .collect();
        let alpha: Vec<f64> = predicted
            .iter()
            .zip(posterior)
            .zip(&self.class_priors)
            .map(|((m, p), d)| m * p / d)
            .collect();
        let total: f64 = alpha.iter().sum();
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite forward mass".into()));
        }
        if total > 0.0 {
            Ok(alpha.into_iter().map(|a| a / total).collect())
        } else {
            log::warn!("all emissions vanished; belief falls back to the predicted prior");
            let s: f64 = predicted.iter().sum();
            Ok(predicted.into_iter().map(|m| m / s).collect())
        }
    }

    /// Forward recursion step: updates and returns the stored belief.
    pub fn forward_step(&mut self, posterior: &[f64]) -> Result<Vec<f64>> {
        self.gamma = self.forward_from(&self.gamma, posterior)?;
        Ok(self.gamma.clone())
    }

    /// Recursive-Validation and update of the state classifier against
    /// one-hot targets.
    pub fn update_classifier(&mut self, xs: &[Tensor], labels: &[usize]) -> Result<()> {
        if xs.len() != labels.len() {
            return Err(arg_err!("{} inputs but {} labels", xs.len(), labels.len()));
        }
        let targets = one_hot(labels, self.k)?
            .into_iter()
            .map(Tensor::vector)
            .collect::<Result<Vec<_>>>()?;
        self.clf.rv_select(xs, &targets)?;
        self.clf.update(xs, &targets)
    }

    /// Full gating update on one block: classifier, transition counts, then
    /// the class priors from the configured source.
    pub fn update(&mut self, xs: &[Tensor], labels: &[usize]) -> Result<()> {
        self.update_classifier(xs, labels)?;
        self.update_transitions(labels)?;
        if self.prior_source == PriorSource::PosteriorMean {
            self.posterior_mass.resize(self.k, 0.0);
            for m in &mut self.posterior_mass {
                *m *= self.lambda_g;
            }
            for x in xs {
                let post = self.classify(x)?;
                for (m, p) in self.posterior_mass.iter_mut().zip(post) {
                    *m += p;
                }
            }
            let total: f64 = self.posterior_mass.iter().sum();
            if total > 0.0 {
                let mean: Vec<f64> = self.posterior_mass.iter().map(|m| m / total).collect();
                self.class_priors = floor_and_normalize(&mean);
            }
        }
        Ok(())
    }

    /// Adds a state with zero classifier score, zero transition counts and
    /// no initial mass.
    pub fn append_state(&mut self) -> Result<()> {
        self.clf.extend_output()?;
        self.k += 1;
        for row in &mut self.transition_counts {
            row.push(0.0);
        }
        self.transition_counts.push(vec![0.0; self.k]);
        self.transition = normalize_rows(&self.transition_counts);
        // rows that previously had counts keep zero mass into the new state;
        // a fully untrained matrix stays uniform
        self.pi.push(0.0);
        self.gamma.push(0.0);
        self.label_counts.push(0.0);
        self.posterior_mass.resize(self.k, 0.0);
        let total: f64 = self.label_counts.iter().sum();
        self.class_priors = if total > 0.0 {
            floor_and_normalize(&self.label_counts.iter().map(|c| c / total).collect::<Vec<_>>())
        } else {
            vec![1.0 / self.k as f64; self.k]
        };
        Ok(())
    }
}

/// Normalizes `p`; if any entry falls under the floor, mixes in just enough
/// of the floor that every entry stays at or above it.
fn floor_and_normalize(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    let k = p.len() as f64;
    if !(s > 0.0) {
        return vec![1.0 / k; p.len()];
    }
    let q: Vec<f64> = p.iter().map(|v| v / s).collect();
    if q.iter().all(|v| *v >= PRIOR_FLOOR) {
        return q;
    }
    q.into_iter().map(|v| PRIOR_FLOOR + (1.0 - k * PRIOR_FLOOR) * v).collect()
}

fn check_distribution(p: &[f64], k: usize, what: &str) -> Result<()> {
    if p.len() != k {
        return Err(arg_err!("{what} has {} entries, expected {k}", p.len()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(arg_err!("{what} has negative or non-finite entries"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(arg_err!("{what} sums to {s}, not 1"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gating(k: usize) -> HmmGating {
        HmmGating::new(k, &[4], 3, 1.0, 1.0).unwrap()
    }

    fn assert_row_stochastic(g: &HmmGating) {
        for row in g.transition() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn empty_sequence_leaves_transition_unchanged() {
        let mut g = gating(3);
        g.update_transitions(&[0, 1, 1, 2]).unwrap();
        let before = g.transition().to_vec();
        g.update_transitions(&[]).unwrap();
        assert_eq!(g.transition(), before.as_slice());
    }

    #[test]
    fn hand_counted_transitions() {
        let mut g = gating(2);
        g.update_transitions(&[0, 0, 1, 1]).unwrap();
        assert_eq!(g.transition_counts(), &[vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(g.transition(), &[vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_row_stochastic(&g);
        assert_eq!(g.class_priors(), &[0.5, 0.5]);
    }

    #[test]
    fn unseen_rows_stay_uniform_and_priors_floored() {
        let mut g = gating(3);
        g.update_transitions(&[0, 0, 0, 1]).unwrap();
        assert_eq!(g.transition()[2], vec![1.0 / 3.0; 3]);
        assert!(g.class_priors()[2] >= PRIOR_FLOOR);
        assert!((g.class_priors().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_row_stochastic(&g);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut g = gating(2);
        assert!(matches!(g.update_transitions(&[0, 2]), Err(Error::Argument(_))));
        assert!(one_hot(&[3], 3).is_err());
    }

    #[test]
    fn forgetting_decays_old_counts() {
        let mut g = HmmGating::new(2, &[1], 1, 1.0, 0.5).unwrap();
        g.update_transitions(&[0, 0, 0]).unwrap();
        g.update_transitions(&[0, 1]).unwrap();
        // 0->0: 2 * 0.5 plus the pair across the block boundary; 0->1: 1
        assert_eq!(g.transition_counts()[0], vec![2.0, 1.0]);
        g.break_sequence();
        g.update_transitions(&[0]).unwrap();
        assert_eq!(g.transition_counts()[1], vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn one_hot_definition() {
        assert_eq!(one_hot(&[1, 0], 3).unwrap(), vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
    }

    #[test]
    fn uniform_transition_reduces_to_posterior() {
        let mut g = gating(3);
        let post = [0.2, 0.5, 0.3];
        let gamma = g.forward_step(&post).unwrap();
        for (a, b) in gamma.iter().zip(post) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_transition_is_sticky() {
        let mut g = gating(3);
        g.set_transition(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        g.set_gamma(vec![0.0, 1.0, 0.0]).unwrap();
        for _ in 0..20 {
            let gamma = g.forward_step(&[0.98, 0.01, 0.01]).unwrap();
            assert_eq!(gamma, vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn vanished_emissions_fall_back_to_prediction() {
        let mut g = gating(2);
        g.set_transition(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        g.set_gamma(vec![1.0, 0.0]).unwrap();
        let gamma = g.forward_step(&[0.0, 0.0]).unwrap();
        assert!((gamma[0] - 0.9).abs() < 1e-15 && (gamma[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn classifier_learns_single_class_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = gating(3);
        let xs: Vec<Tensor> = (0..40)
            .map(|_| Tensor::from_fn(&[4], |_| rng.random_range(0.0..1.0)).unwrap())
            .collect();
        g.update_classifier(&xs, &vec![2; 40]).unwrap();
        assert_eq!(argmax(&g.classify(&xs[3]).unwrap()), 2);
    }

    #[test]
    fn classifier_separates_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = gating(3);
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for i in 0..90 {
            let z = i % 3;
            xs.push(Tensor::from_fn(&[4], |idx| if idx[0] == z { 1.0 } else { 0.0 } + rng.random_range(0.0..0.2)).unwrap());
            zs.push(z);
        }
        // the first block only validates zero models, so f* moves on the second
        g.update_classifier(&xs, &zs).unwrap();
        g.update_classifier(&xs, &zs).unwrap();
        for (x, z) in xs.iter().zip(&zs) {
            assert_eq!(argmax(&g.classify(x).unwrap()), *z);
        }
    }

    #[test]
    fn posterior_mean_priors_average_the_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = gating(3).with_prior_source(PriorSource::PosteriorMean);
        let xs: Vec<Tensor> = (0..60)
            .map(|_| Tensor::from_fn(&[4], |_| rng.random_range(0.0..1.0)).unwrap())
            .collect();
        // skewed labels: frequencies would give [0.1, 0.8, 0.1]
        let zs: Vec<usize> = (0..60).map(|i| if i < 6 { 0 } else if i < 54 { 1 } else { 2 }).collect();
        g.update(&xs, &zs).unwrap();
        g.update(&xs, &zs).unwrap();
        // each block is scored by the classifier just trained on it
        let mut mass = vec![0.0; 3];
        let mut g1 = gating(3).with_prior_source(PriorSource::PosteriorMean);
        g1.update(&xs, &zs).unwrap();
        for x in &xs {
            for (m, p) in mass.iter_mut().zip(g1.classify(x).unwrap()) {
                *m += p;
            }
        }
        let mut g2 = g1.clone();
        g2.update(&xs, &zs).unwrap();
        for x in &xs {
            for (m, p) in mass.iter_mut().zip(g2.classify(x).unwrap()) {
                *m += p;
            }
        }
        let total: f64 = mass.iter().sum();
        for (a, m) in g.class_priors().iter().zip(&mass) {
            assert!((a - m / total).abs() < 1e-12);
        }
        assert_eq!(g.class_priors(), g2.class_priors());
        let mut freq = gating(3);
        freq.update(&xs, &zs).unwrap();
        assert!((freq.class_priors()[1] - 0.8).abs() < 1e-5);
    }

    #[test]
    fn appended_state_gets_no_predicted_mass() {
        let mut g = gating(2);
        g.update_transitions(&[0, 0, 1, 1, 0]).unwrap();
        g.append_state().unwrap();
        assert_eq!(g.k(), 3);
        assert_row_stochastic(&g);
        assert_eq!(g.transition()[0][2], 0.0);
        assert_eq!(g.transition()[2], vec![1.0 / 3.0; 3]);
        let gamma = g.forward_step(&[0.1, 0.1, 0.8]).unwrap();
        assert_eq!(gamma[2], 0.0);
        assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
