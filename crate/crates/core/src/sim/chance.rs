//! Chance-level reaching: a random walk at maximal speed against the
//! schedule's targets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::sim::effector::{EffectorState, Limb};
use crate::sim::session::{SimConfig, TrialRecord};
use crate::sim::task::{TaskKind, TaskSchedule};

/// Per task type, over all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceStats {
    pub limb: Limb,
    /// Success rate of each run (%).
    pub sr_runs: Vec<f64>,
    pub sr_mean: f64,
    pub sr_sd: f64,
    /// Over hit trials of all runs; `None` when nothing was hit.
    pub r_ratio_mean: Option<f64>,
    pub r_ratio_sd: Option<f64>,
    pub trials_per_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceReport {
    pub n_runs: usize,
    pub timeout_ticks: usize,
    pub per_limb: Vec<ChanceStats>,
}

impl ChanceReport {
    pub fn limb(&self, limb: Limb) -> Option<&ChanceStats> {
        self.per_limb.iter().find(|s| s.limb == limb)
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Timeout covering 99% of the observed trial durations, in ticks.
pub fn timeout_from_trials(trials: &[TrialRecord], tick_s: f64) -> Option<usize> {
    let d: Vec<f64> = trials.iter().map(|t| t.duration_s).collect();
    percentile(&d, 99.0).map(|s| ((s / tick_s).ceil() as usize).max(1))
}

pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn random_step<R: Rng + ?Sized>(limb: Limb, e: &EffectorState, output_dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mut y = vec![0.0; output_dim];
    let comps = limb.components(output_dim)?;
    if limb.is_translation() {
        let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = d.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (c, a) in comps.iter().zip(d) {
            y[*c] = a / n * e.max_speed;
        }
    } else {
        y[comps[0]] = if rng.random_bool(0.5) { e.max_angular_speed } else { -e.max_angular_speed };
    }
    Ok(y)
}

/// Random-walk baseline over every trial of `schedule`, `n_runs` times.
///
/// Each run starts from the workspace's initial posture and carries the
/// position over between trials. `timeout_ticks` defaults to the config's
/// trial timeout.
pub fn chance_baseline(
    schedule: &TaskSchedule,
    cfg: &SimConfig,
    n_runs: usize,
    timeout_ticks: Option<usize>,
    seed: u64,
) -> Result<ChanceReport> {
    if n_runs == 0 {
        return Err(arg_err!("chance baseline needs at least one run"));
    }
    schedule.validate(&cfg.layout, &cfg.workspace)?;
    let timeout = timeout_ticks.unwrap_or_else(|| cfg.timeout_ticks());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits: BTreeMap<String, (Limb, Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for _ in 0..n_runs {
        let mut e = cfg.workspace.initial_effector();
        let mut run_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for task in &schedule.tasks {
            let TaskKind::Trials { targets } = &task.kind else { continue };
            let limb = cfg.layout.limb(task.state).expect("validated");
            let key = format!("{limb:?}");
            let entry = hits.entry(key.clone()).or_insert_with(|| (limb, Vec::new(), Vec::new(), 0));
            let counts = run_counts.entry(key).or_insert((0, 0));
            for target in targets {
                let start = target.distance(&e).expect("limb target");
                let threshold = cfg.hit_threshold(target);
                let mut path = 0.0;
                let mut hit = false;
                for _ in 0..timeout {
                    let y = random_step(limb, &e, cfg.layout.output_dim, &mut rng)?;
                    let next = e.step(&y)?;
                    path += match (e.position(limb), next.position(limb)) {
                        (Some(p), Some(q)) => (0..3).map(|i| (q[i] - p[i]).powi(2)).sum::<f64>().sqrt(),
                        _ => crate::sim::effector::angle_difference(e.angle(limb).unwrap_or(0.0), next.angle(limb).unwrap_or(0.0)).abs(),
                    };
                    e = next;
                    if target.distance(&e).expect("limb target") < threshold {
                        hit = true;
                        break;
                    }
                }
                counts.1 += 1;
                if hit {
                    counts.0 += 1;
                    let progress = start - target.distance(&e).expect("limb target");
                    if progress > 0.0 {
                        entry.2.push(path / progress);
                    }
                }
            }
            entry.3 = counts.1;
        }
        for (key, (h, n)) in run_counts {
            hits.get_mut(&key).expect("inserted").1.push(100.0 * h as f64 / n as f64);
        }
    }
    let per_limb = hits
        .into_values()
        .map(|(limb, sr_runs, ratios, trials_per_run)| {
            let (sr_mean, sr_sd) = mean_sd(&sr_runs);
            let (rm, rs) = if ratios.is_empty() { (None, None) } else {
                let (m, s) = mean_sd(&ratios);
                (Some(m), Some(s))
            };
            ChanceStats { limb, sr_runs, sr_mean, sr_sd, r_ratio_mean: rm, r_ratio_sd: rs, trials_per_run }
        })
        .collect();
    Ok(ChanceReport { n_runs, timeout_ticks: timeout, per_limb })
}
