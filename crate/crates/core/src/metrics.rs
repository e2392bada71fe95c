//! Discrete and continuous performance indicators computed from session logs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{arg_err, Error, Result};
use crate::sim::effector::{Limb, StateLayout};
use crate::sim::session::{Phase, SessionLog, TickRecord, TrialRecord};

/// Rows are instructed states, columns decoded states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    /// Samples left out (latency windows).
    pub excluded: usize,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(arg_err!("confusion matrix must be square and non-empty"));
        }
        Ok(Self { counts, excluded: 0 })
    }

    /// Counts `(instructed, decoded)` pairs whose `excluded` flag is unset.
    pub fn from_streams(k: usize, instructed: &[usize], decoded: &[usize], excluded: &[bool]) -> Result<Self> {
        if instructed.len() != decoded.len() || instructed.len() != excluded.len() {
            return Err(arg_err!("state streams of different lengths"));
        }
        let mut cm = Self::new(vec![vec![0; k]; k])?;
        for ((&z, &d), &skip) in instructed.iter().zip(decoded).zip(excluded) {
            if z >= k || d >= k {
                return Err(arg_err!("state label outside 0..{k}"));
            }
            if skip {
                cm.excluded += 1;
            } else {
                cm.counts[z][d] += 1;
            }
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(tp, fp, fn, tn)` of state `k` against all others.
    pub fn one_vs_all(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let fp = (0..self.k()).map(|i| self.counts[i][k]).sum::<u64>() - tp;
        let fn_ = self.counts[k].iter().sum::<u64>() - tp;
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }

    pub fn precision_recall(&self) -> Vec<(f64, f64)> {
        (0..self.k())
            .map(|k| {
                let (tp, fp, fn_, _) = self.one_vs_all(k);
                let ratio = |a: u64, b: u64| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
                (ratio(tp, fp), ratio(tp, fn_))
            })
            .collect()
    }

    /// Fraction of samples on the diagonal.
    pub fn sample_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Undefined("empty confusion matrix".into()));
        }
        Ok((0..self.k()).map(|k| self.counts[k][k]).sum::<u64>() as f64 / total as f64)
    }
}

/// Macro one-vs-all accuracy and F1 score.
///
/// A state with `P = R = 0` contributes 0 to the F-score average.
pub fn accuracy_fscore(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Undefined("empty confusion matrix".into()));
    }
    let k = cm.k() as f64;
    let mut acc = 0.0;
    for s in 0..cm.k() {
        let (tp, _, _, tn) = cm.one_vs_all(s);
        acc += (tp + tn) as f64 / total as f64;
    }
    let f: f64 = cm
        .precision_recall()
        .into_iter()
        .map(|(p, r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .sum();
    Ok((acc / k, f / k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// The switch must happen within this many ticks of the instruction.
    pub window_ticks: usize,
    /// Ticks the new state must hold, the switch tick included.
    pub stable_ticks: usize,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self { window_ticks: 50, stable_ticks: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub transitions: usize,
    /// Seconds, one per successful transition.
    pub latencies_s: Vec<f64>,
    pub failed: usize,
    /// Per tick: inside a latency window.
    pub excluded: Vec<bool>,
}

impl LatencyReport {
    pub fn mean_s(&self) -> Option<f64> {
        (!self.latencies_s.is_empty()).then(|| crate::sim::chance::mean_sd(&self.latencies_s).0)
    }

    pub fn sd_s(&self) -> Option<f64> {
        (!self.latencies_s.is_empty()).then(|| crate::sim::chance::mean_sd(&self.latencies_s).1)
    }
}

/// Finds, for every change of instructed state, the first tick from which
/// the decoded state equals the new state for `stable_ticks` ticks.
///
/// The switch has to start within `window_ticks` of the instruction and the
/// stable run has to fit before the next instruction. Ticks from the
/// instruction up to (excluding) the switch are marked excluded; failed
/// transitions exclude nothing.
pub fn latency_analysis(instructed: &[usize], decoded: &[usize], tick_s: f64, p: &LatencyParams) -> Result<LatencyReport> {
    if instructed.len() != decoded.len() {
        return Err(arg_err!("state streams of different lengths"));
    }
    if p.stable_ticks == 0 {
        return Err(arg_err!("stable_ticks must be positive"));
    }
    let n = instructed.len();
    let mut report = LatencyReport { transitions: 0, latencies_s: Vec::new(), failed: 0, excluded: vec![false; n] };
    for i in 1..n {
        if instructed[i] == instructed[i - 1] {
            continue;
        }
        report.transitions += 1;
        let s = instructed[i];
        let seg_end = (i..n).find(|&j| instructed[j] != s).unwrap_or(n);
        let last_start = (i + p.window_ticks).min(seg_end);
        let switch = (i..last_start).find(|&j| j + p.stable_ticks <= seg_end && decoded[j..j + p.stable_ticks].iter().all(|&d| d == s));
        match switch {
            Some(j) => {
                report.latencies_s.push((j - i) as f64 * tick_s);
                for e in &mut report.excluded[i..j] {
                    *e = true;
                }
            }
            None => report.failed += 1,
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBlocks {
    pub count: usize,
    pub rate_per_min: f64,
    /// Mean block duration in seconds; 0 when there are no blocks.
    pub mean_duration_s: f64,
    /// False when there are no blocks (duration undefined).
    pub duration_defined: bool,
}

/// Maximal runs of misclassified, non-excluded ticks. Excluded ticks end a
/// run and do not count toward the elapsed time.
pub fn error_blocks(instructed: &[usize], decoded: &[usize], excluded: &[bool], tick_s: f64) -> Result<ErrorBlocks> {
    if instructed.len() != decoded.len() || instructed.len() != excluded.len() {
        return Err(arg_err!("state streams of different lengths"));
    }
    let mut lengths = Vec::new();
    let mut run = 0usize;
    let mut included = 0usize;
    for ((z, d), &skip) in instructed.iter().zip(decoded).zip(excluded) {
        let wrong = !skip && z != d;
        if !skip {
            included += 1;
        }
        if wrong {
            run += 1;
        } else if run > 0 {
            lengths.push(run);
            run = 0;
        }
    }
    if run > 0 {
        lengths.push(run);
    }
    let minutes = included as f64 * tick_s / 60.0;
    if minutes == 0.0 {
        return Err(Error::Undefined("no included samples".into()));
    }
    let count = lengths.len();
    let mean = if count == 0 { 0.0 } else { lengths.iter().sum::<usize>() as f64 / count as f64 * tick_s };
    Ok(ErrorBlocks { count, rate_per_min: count as f64 / minutes, mean_duration_s: mean, duration_defined: count > 0 })
}

/// Mean cosine similarity of `(y, y_hat)` pairs; pairs with a zero vector
/// are skipped and counted.
pub fn cos_sim<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for (y, y_hat) in pairs {
        let ny = y.iter().map(|v| v * v).sum::<f64>();
        let nh = y_hat.iter().map(|v| v * v).sum::<f64>();
        if ny == 0.0 || nh == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = y.iter().zip(y_hat).map(|(a, b)| a * b).sum();
        sum += (dot / (ny * nh).sqrt()).clamp(-1.0, 1.0);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Undefined("no samples with non-zero movement".into()));
    }
    Ok((sum / n as f64, skipped))
}

/// Cosine similarity of the limb's components over ticks instructed to
/// move that limb.
pub fn limb_cos_sim(ticks: &[TickRecord], layout: &StateLayout, limb: Limb) -> Result<(f64, usize)> {
    let comps = limb.components(layout.output_dim)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = ticks
        .iter()
        .filter(|t| layout.limb(t.instructed) == Some(limb))
        .map(|t| (comps.iter().map(|&c| t.y_opt[c]).collect(), comps.iter().map(|&c| t.y_hat[c]).collect()))
        .collect();
    cos_sim(pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())))
}

/// Path length over the distance actually gained on the target.
///
/// A trial that ends inside the hit threshold has gained
/// `start_distance - end_distance`, which the path can never undercut.
pub fn r_ratio(trial: &TrialRecord) -> Option<f64> {
    let gained = trial.start_distance - trial.end_distance;
    (gained > 0.0).then(|| trial.path_length / gained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachStats {
    pub limb: Limb,
    pub trials: usize,
    pub hits: usize,
    /// Percent.
    pub sr: f64,
    pub r_ratio_mean: Option<f64>,
    pub r_ratio_sd: Option<f64>,
    pub r_ratio_min: Option<f64>,
    /// Hit trials without distance to gain (already on target).
    pub zero_distance: usize,
}

/// Success rate and R-ratio (hit trials only) per task type.
pub fn reach_metrics(trials: &[TrialRecord]) -> Vec<ReachStats> {
    let mut limbs: Vec<Limb> = Vec::new();
    for t in trials {
        if !limbs.contains(&t.limb) {
            limbs.push(t.limb);
        }
    }
    limbs
        .into_iter()
        .map(|limb| {
            let mine: Vec<&TrialRecord> = trials.iter().filter(|t| t.limb == limb).collect();
            let hits: Vec<&&TrialRecord> = mine.iter().filter(|t| t.hit).collect();
            let ratios: Vec<f64> = hits.iter().filter_map(|t| r_ratio(t)).collect();
            let (m, s) = if ratios.is_empty() {
                (None, None)
            } else {
                let (m, s) = crate::sim::chance::mean_sd(&ratios);
                (Some(m), Some(s))
            };
            ReachStats {
                limb,
                trials: mine.len(),
                hits: hits.len(),
                sr: if mine.is_empty() { 0.0 } else { 100.0 * hits.len() as f64 / mine.len() as f64 },
                r_ratio_mean: m,
                r_ratio_sd: s,
                r_ratio_min: ratios.iter().copied().reduce(f64::min),
                zero_distance: hits.len() - ratios.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// The 95% interval contains zero.
    pub stable: bool,
}

/// Ordinary least squares with a 95% t-interval (n - 2 degrees of freedom)
/// on the slope.
pub fn slope_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let n = points.len();
    if n < 3 {
        return Err(arg_err!("slope fit needs at least 3 points, got {n}"));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Undefined("all x values are identical".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0).map_err(|e| Error::Numeric(e.to_string()))?.inverse_cdf(0.975);
    let (ci_low, ci_high) = (slope - t * se, slope + t * se);
    Ok(SlopeFit { slope, intercept, ci_low, ci_high, stable: ci_low <= 0.0 && 0.0 <= ci_high })
}

/// One-sided Welch t-test of `mean(a) > mean(b)`; returns the p-value.
pub fn welch_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(arg_err!("Welch test needs two non-empty samples"));
    }
    let (ma, sa) = crate::sim::chance::mean_sd(a);
    let (mb, sb) = crate::sim::chance::mean_sd(b);
    let va = sa * sa / a.len() as f64;
    let vb = sb * sb / b.len() as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma > mb { 0.0 } else { 1.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let mut denom = 0.0;
    if a.len() > 1 {
        denom += va * va / (a.len() - 1) as f64;
    }
    if b.len() > 1 {
        denom += vb * vb / (b.len() - 1) as f64;
    }
    let df = if denom > 0.0 { se2 * se2 / denom } else { 1.0 };
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

/// Monte Carlo p-value of `observed` against a null sample: the share of
/// null draws at least as large, with the usual +1 correction.
pub fn monte_carlo_p(observed: f64, null: &[f64]) -> f64 {
    let ge = null.iter().filter(|&&v| v >= observed).count();
    (ge + 1) as f64 / (null.len() + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbCosSim {
    pub limb: Limb,
    pub value: Option<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorReport {
    pub phase: Phase,
    pub ticks: usize,
    /// Macro one-vs-all accuracy.
    pub accuracy: f64,
    pub f_score: f64,
    /// Plain fraction of correctly decoded samples.
    pub sample_accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub latency_mean_s: Option<f64>,
    pub latency_sd_s: Option<f64>,
    pub transitions: usize,
    pub failed_transitions: usize,
    pub error_blocks: ErrorBlocks,
    pub cos_sim: Vec<LimbCosSim>,
    pub reach: Vec<ReachStats>,
}

impl IndicatorReport {
    /// Flat `(column, value)` pairs for the per-session CSV row.
    pub fn flat(&self) -> Vec<(String, f64)> {
        let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
        let mut out = vec![
            ("accuracy".to_string(), self.accuracy),
            ("f_score".to_string(), self.f_score),
            ("sample_accuracy".to_string(), self.sample_accuracy),
            ("latency_mean_s".to_string(), opt(self.latency_mean_s)),
            ("failed_transitions".to_string(), self.failed_transitions as f64),
            ("error_block_rate_per_min".to_string(), self.error_blocks.rate_per_min),
            ("error_block_duration_s".to_string(), self.error_blocks.mean_duration_s),
        ];
        for c in &self.cos_sim {
            out.push((format!("cos_sim_{}", limb_key(c.limb)), opt(c.value)));
        }
        for r in &self.reach {
            out.push((format!("sr_{}", limb_key(r.limb)), r.sr));
            out.push((format!("r_ratio_{}", limb_key(r.limb)), opt(r.r_ratio_mean)));
        }
        out
    }
}

pub fn limb_key(limb: Limb) -> &'static str {
    match limb {
        Limb::LeftHand => "left_hand",
        Limb::RightHand => "right_hand",
        Limb::LeftWrist => "left_wrist",
        Limb::RightWrist => "right_wrist",
    }
}

/// All indicators of one phase of a session.
pub fn evaluate(log: &SessionLog, layout: &StateLayout, phase: Phase, latency: &LatencyParams) -> Result<IndicatorReport> {
    if layout.k() != log.k {
        return Err(arg_err!("layout has {} states, log has {}", layout.k(), log.k));
    }
    let ticks = log.ticks_in(phase);
    let instructed: Vec<usize> = ticks.iter().map(|t| t.instructed).collect();
    let decoded: Vec<usize> = ticks.iter().map(|t| t.decoded).collect();
    let lat = latency_analysis(&instructed, &decoded, log.tick_s, latency)?;
    let cm = ConfusionMatrix::from_streams(log.k, &instructed, &decoded, &lat.excluded)?;
    let (accuracy, f_score) = accuracy_fscore(&cm)?;
    let pr = cm.precision_recall();
    let cos = layout
        .limbs
        .iter()
        .flatten()
        .map(|&limb| match limb_cos_sim(ticks, layout, limb) {
            Ok((v, skipped)) => LimbCosSim { limb, value: Some(v), skipped },
            Err(_) => LimbCosSim { limb, value: None, skipped: 0 },
        })
        .collect();
    Ok(IndicatorReport {
        phase,
        ticks: ticks.len(),
        accuracy,
        f_score,
        sample_accuracy: cm.sample_accuracy()?,
        precision: pr.iter().map(|p| p.0).collect(),
        recall: pr.iter().map(|p| p.1).collect(),
        latency_mean_s: lat.mean_s(),
        latency_sd_s: lat.sd_s(),
        transitions: lat.transitions,
        failed_transitions: lat.failed,
        error_blocks: error_blocks(&instructed, &decoded, &lat.excluded, log.tick_s)?,
        confusion: cm,
        cos_sim: cos,
        reach: reach_metrics(&log.trials_in(phase)),
    })
}

/// Zero-slope analysis of every flat indicator across sessions (x = session
/// index). Indicators with missing values in any session are skipped.
pub fn stability(reports: &[IndicatorReport]) -> Vec<(String, Result<SlopeFit>)> {
    let Some(first) = reports.first() else { return Vec::new() };
    let flats: Vec<Vec<(String, f64)>> = reports.iter().map(IndicatorReport::flat).collect();
    first
        .flat()
        .into_iter()
        .map(|(name, _)| {
            let pts: Vec<(f64, f64)> = flats
                .iter()
                .enumerate()
                .filter_map(|(i, f)| f.iter().find(|(n, _)| *n == name).map(|(_, v)| (i as f64, *v)))
                .filter(|p| p.1.is_finite())
                .collect();
            (name, slope_fit(&pts))
        })
        .collect()
}
