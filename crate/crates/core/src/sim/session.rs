//! Closed-loop sessions: synthetic signal, features, decoding, assisted
//! control and the effector, advanced in lock-step at the decode rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::features::{output_features, CcwtExtractor, EpochBuffer, FeatureConfig, Target};
use crate::mslm::{DecodeResult, MslmDecoder};
use crate::sim::effector::{EffectorState, Limb, StateLayout};
use crate::sim::neural::SynthNeuralModel;
use crate::sim::task::{TaskKind, TaskSchedule, Workspace};
use crate::tensor::Tensor;

/// Lower bound on `omega_c` while the assistance cap is enforced.
pub const MIN_OMEGA_C: f64 = 0.7;

/// `omega_c * y_hat + (1 - omega_c) * y_opt`.
pub fn assist(y_hat: &[f64], y_opt: &[f64], omega_c: f64, cap: bool) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&omega_c) {
        return Err(arg_err!("omega_c {omega_c} outside [0, 1]"));
    }
    if cap && omega_c < MIN_OMEGA_C {
        return Err(arg_err!("omega_c {omega_c} gives more than 30% assistance"));
    }
    if y_hat.len() != y_opt.len() {
        return Err(arg_err!("assist inputs of length {} and {}", y_hat.len(), y_opt.len()));
    }
    let omega_s = 1.0 - omega_c;
    Ok(y_hat.iter().zip(y_opt).map(|(a, b)| omega_c * a + omega_s * b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssistConfig {
    pub enabled: bool,
    /// `omega_c` at the start of each training phase.
    pub omega_c_start: f64,
    /// `omega_c` once `ramp_updates` calibration updates have happened.
    pub omega_c_end: f64,
    pub ramp_updates: u64,
    /// Reject `omega_c < 0.7`.
    pub cap: bool,
}

impl Default for AssistConfig {
    fn default() -> Self {
        Self { enabled: true, omega_c_start: MIN_OMEGA_C, omega_c_end: 1.0, ramp_updates: 4, cap: true }
    }
}

impl AssistConfig {
    pub fn omega_c(&self, updates: u64) -> f64 {
        if self.ramp_updates == 0 {
            return self.omega_c_end;
        }
        let f = (updates as f64 / self.ramp_updates as f64).min(1.0);
        self.omega_c_start + (self.omega_c_end - self.omega_c_start) * f
    }

    pub fn validate(&self) -> Result<()> {
        for w in [self.omega_c_start, self.omega_c_end] {
            if !(0.0..=1.0).contains(&w) || (self.cap && w < MIN_OMEGA_C) {
                return Err(arg_err!("assist weight {w} outside the allowed range"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub features: FeatureConfig,
    pub layout: StateLayout,
    pub workspace: Workspace,
    /// Hand hit threshold (meters).
    pub hit_radius: f64,
    /// Wrist hit threshold (degrees).
    pub angle_hit: f64,
    pub trial_timeout_s: f64,
    /// Samples per calibration update.
    pub block_len: usize,
    /// Ticks between an instruction change and the signal change.
    pub reaction_delay_ticks: usize,
    pub assist: AssistConfig,
    /// Keep test-phase feature tensors in the log for replay.
    pub record_features: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::desk(StateLayout::three_state())
    }
}

impl SimConfig {
    pub fn desk(layout: StateLayout) -> Self {
        Self {
            features: FeatureConfig::desk(),
            layout,
            workspace: Workspace::default(),
            hit_radius: 0.05,
            angle_hit: 10.0,
            trial_timeout_s: 15.0,
            block_len: 150,
            reaction_delay_ticks: 0,
            assist: AssistConfig::default(),
            record_features: false,
        }
    }

    pub fn tick_s(&self) -> f64 {
        self.features.slide_s
    }

    pub fn timeout_ticks(&self) -> usize {
        (self.trial_timeout_s / self.tick_s()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.workspace.validate()?;
        self.assist.validate()?;
        self.layout.masks()?;
        if self.block_len == 0 {
            return Err(arg_err!("block_len must be positive"));
        }
        if !(self.hit_radius > 0.0 && self.angle_hit > 0.0 && self.trial_timeout_s > 0.0) {
            return Err(arg_err!("hit thresholds and timeout must be positive"));
        }
        Ok(())
    }

    /// Hit threshold in the target's own unit.
    pub fn hit_threshold(&self, target: &Target) -> f64 {
        match target {
            Target::Angle { .. } => self.angle_hit,
            _ => self.hit_radius,
        }
    }
}

/// Anything that can sit in the closed loop.
pub trait SessionDecoder {
    /// Called at the start of every phase.
    fn begin_phase(&mut self);
    /// `y_opt` and `instructed` are only for oracle stand-ins.
    fn decode_tick(&mut self, x: &Tensor, y_opt: &[f64], instructed: usize) -> Result<DecodeResult>;
    fn calibrate(&mut self, xs: &[Tensor], ys: &[Vec<f64>], zs: &[usize]) -> Result<()>;
}

impl SessionDecoder for MslmDecoder {
    fn begin_phase(&mut self) {
        self.gating_mut().reset_belief();
        self.gating_mut().break_sequence();
    }

    fn decode_tick(&mut self, x: &Tensor, _: &[f64], _: usize) -> Result<DecodeResult> {
        self.decode(x)
    }

    fn calibrate(&mut self, xs: &[Tensor], ys: &[Vec<f64>], zs: &[usize]) -> Result<()> {
        self.calibrate_update(xs, ys, zs)
    }
}

/// Returns the optimal increment and the instructed state.
#[derive(Debug, Clone)]
pub struct OracleDecoder {
    pub k: usize,
    pub updates: u64,
}

impl OracleDecoder {
    pub fn new(k: usize) -> Self {
        Self { k, updates: 0 }
    }
}

impl SessionDecoder for OracleDecoder {
    fn begin_phase(&mut self) {}

    fn decode_tick(&mut self, _: &Tensor, y_opt: &[f64], instructed: usize) -> Result<DecodeResult> {
        let mut gamma = vec![0.0; self.k];
        gamma[instructed] = 1.0;
        Ok(DecodeResult { y_hat: y_opt.to_vec(), posterior: gamma.clone(), gamma, state: instructed })
    }

    fn calibrate(&mut self, _: &[Tensor], _: &[Vec<f64>], _: &[usize]) -> Result<()> {
        self.updates += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub t: f64,
    pub phase: Phase,
    pub task: usize,
    pub instructed: usize,
    /// State driving the synthetic signal (lags `instructed` by the reaction delay).
    pub emitted: usize,
    pub decoded: usize,
    pub gamma: Vec<f64>,
    pub posterior: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub y_opt: Vec<f64>,
    pub applied: Vec<f64>,
    pub omega_s: f64,
    pub target: Target,
    pub left_pos: [f64; 3],
    pub right_pos: [f64; 3],
    pub left_angle: f64,
    pub right_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub phase: Phase,
    pub task: usize,
    pub state: usize,
    pub limb: Limb,
    pub target: Target,
    pub start_tick: u64,
    pub end_tick: u64,
    pub start_distance: f64,
    pub end_distance: f64,
    pub path_length: f64,
    pub duration_s: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionLog {
    pub tick_s: f64,
    pub k: usize,
    pub output_dim: usize,
    pub ticks: Vec<TickRecord>,
    pub trials: Vec<TrialRecord>,
    /// Tick index of every calibration update.
    pub updates: Vec<u64>,
    /// Training samples left over at the end of a training phase.
    pub dropped_samples: usize,
    /// Test-phase features, aligned with the test-phase ticks.
    #[serde(skip)]
    pub features: Vec<Tensor>,
}

impl SessionLog {
    /// Ticks of one phase (phases are contiguous).
    pub fn ticks_in(&self, phase: Phase) -> &[TickRecord] {
        let start = self.ticks.iter().position(|t| t.phase == phase).unwrap_or(self.ticks.len());
        let len = self.ticks[start..].iter().take_while(|t| t.phase == phase).count();
        &self.ticks[start..start + len]
    }

    pub fn trials_in(&self, phase: Phase) -> Vec<TrialRecord> {
        self.trials.iter().filter(|t| t.phase == phase).cloned().collect()
    }
}

/// One session: a training phase with calibration updates, then a test
/// phase with the decoder frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub training: TaskSchedule,
    pub test: TaskSchedule,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub log: SessionLog,
    pub effector: EffectorState,
}

/// Movement increment scaled to the signal's intention units: hand
/// components by `max_speed`, wrist components by `max_angular_speed`.
pub fn normalized_intention(y: &[f64], layout: &StateLayout, e: &EffectorState) -> Result<Vec<f64>> {
    let mut out = y.to_vec();
    for limb in layout.limbs.iter().flatten() {
        let scale = if limb.is_translation() { e.max_speed } else { e.max_angular_speed };
        for c in limb.components(layout.output_dim)? {
            out[c] /= scale;
        }
    }
    Ok(out)
}

fn limb_travel(a: &EffectorState, b: &EffectorState, limb: Limb) -> f64 {
    match (a.position(limb), b.position(limb)) {
        (Some(p), Some(q)) => (0..3).map(|i| (q[i] - p[i]).powi(2)).sum::<f64>().sqrt(),
        _ => crate::sim::effector::angle_difference(a.angle(limb).unwrap_or(0.0), b.angle(limb).unwrap_or(0.0)).abs(),
    }
}

struct Runner<'a> {
    cfg: &'a SimConfig,
    model: &'a SynthNeuralModel,
    extractor: CcwtExtractor,
    buffer: EpochBuffer,
    rng: ChaCha8Rng,
    sample_clock: u64,
    warm_samples: u64,
    tick: u64,
    instructed_history: Vec<usize>,
    effector: EffectorState,
    log: SessionLog,
    block_x: Vec<Tensor>,
    block_y: Vec<Vec<f64>>,
    block_z: Vec<usize>,
    phase_updates: u64,
}

impl Runner<'_> {
    fn emitted_state(&self) -> usize {
        let n = self.instructed_history.len();
        let d = self.cfg.reaction_delay_ticks;
        if n > d {
            self.instructed_history[n - 1 - d]
        } else {
            self.instructed_history[0]
        }
    }

    fn push_signal(&mut self, state: usize, intention: &[f64], n: usize) -> Result<()> {
        let frames = self.model.synth_neural(state, intention, self.sample_clock, n, &mut self.rng)?;
        self.sample_clock += n as u64;
        for f in frames {
            self.buffer.push(f)?;
        }
        Ok(())
    }

    /// Advances one decode tick; returns the distance moved by `limb`.
    fn step(
        &mut self,
        dec: &mut dyn SessionDecoder,
        phase: Phase,
        task: usize,
        state: usize,
        target: Target,
    ) -> Result<f64> {
        let layout = &self.cfg.layout;
        self.instructed_history.push(state);
        let emitted = self.emitted_state();
        let y_opt = output_features(&self.effector, &target, state, layout, true)?.y;
        let intention = if emitted == state {
            normalized_intention(&y_opt, layout, &self.effector)?
        } else {
            vec![0.0; layout.output_dim]
        };
        let sr = self.cfg.features.sample_rate;
        let end = self.warm_samples + ((self.tick + 1) as f64 * self.cfg.tick_s() * sr).round() as u64;
        let n = (end - self.sample_clock) as usize;
        self.push_signal(emitted, &intention, n)?;
        let x = self.extractor.features(&self.buffer.window()?)?;
        let out = dec.decode_tick(&x, &y_opt, state)?;

        let (applied, omega_s) = if phase == Phase::Training && self.cfg.assist.enabled {
            let w = self.cfg.assist.omega_c(self.phase_updates);
            (assist(&out.y_hat, &y_opt, w, self.cfg.assist.cap)?, 1.0 - w)
        } else {
            (out.y_hat.clone(), 0.0)
        };
        let next = self.effector.step(&applied)?;
        let moved = target.limb().map_or(0.0, |l| limb_travel(&self.effector, &next, l));
        self.effector = next;
        self.log.ticks.push(TickRecord {
            tick: self.tick,
            t: self.tick as f64 * self.cfg.tick_s(),
            phase,
            task,
            instructed: state,
            emitted,
            decoded: out.state,
            gamma: out.gamma,
            posterior: out.posterior,
            y_hat: out.y_hat,
            y_opt: y_opt.clone(),
            applied,
            omega_s,
            target,
            left_pos: self.effector.left_pos,
            right_pos: self.effector.right_pos,
            left_angle: self.effector.left_angle,
            right_angle: self.effector.right_angle,
        });
        match phase {
            Phase::Training => {
                self.block_x.push(x);
                self.block_y.push(y_opt);
                self.block_z.push(state);
                if self.block_x.len() == self.cfg.block_len {
                    dec.calibrate(&self.block_x, &self.block_y, &self.block_z)?;
                    self.block_x.clear();
                    self.block_y.clear();
                    self.block_z.clear();
                    self.phase_updates += 1;
                    self.log.updates.push(self.tick);
                }
            }
            Phase::Test => {
                if self.cfg.record_features {
                    self.log.features.push(x);
                }
            }
        }
        self.tick += 1;
        Ok(moved)
    }

    fn run_phase(&mut self, dec: &mut dyn SessionDecoder, phase: Phase, schedule: &TaskSchedule) -> Result<()> {
        dec.begin_phase();
        self.phase_updates = 0;
        let timeout = self.cfg.timeout_ticks();
        for (ti, task) in schedule.tasks.iter().enumerate() {
            match &task.kind {
                TaskKind::Hold { ticks } => {
                    for _ in 0..*ticks {
                        self.step(dec, phase, ti, task.state, Target::None)?;
                    }
                }
                TaskKind::Trials { targets } => {
                    let limb = self
                        .cfg
                        .layout
                        .limb(task.state)
                        .ok_or_else(|| arg_err!("trials scheduled for idle state {}", task.state))?;
                    for target in targets {
                        let start_tick = self.tick;
                        let start_distance = target.distance(&self.effector).expect("limb target");
                        let threshold = self.cfg.hit_threshold(target);
                        let mut path = 0.0;
                        let mut hit = false;
                        for _ in 0..timeout {
                            path += self.step(dec, phase, ti, task.state, *target)?;
                            if target.distance(&self.effector).expect("limb target") < threshold {
                                hit = true;
                                break;
                            }
                        }
                        self.log.trials.push(TrialRecord {
                            phase,
                            task: ti,
                            state: task.state,
                            limb,
                            target: *target,
                            start_tick,
                            end_tick: self.tick,
                            start_distance,
                            end_distance: target.distance(&self.effector).expect("limb target"),
                            path_length: path,
                            duration_s: (self.tick - start_tick) as f64 * self.cfg.tick_s(),
                            hit,
                        });
                    }
                }
            }
        }
        if phase == Phase::Training && !self.block_x.is_empty() {
            log::debug!("dropping {} samples short of a full block", self.block_x.len());
            self.log.dropped_samples += self.block_x.len();
            self.block_x.clear();
            self.block_y.clear();
            self.block_z.clear();
        }
        Ok(())
    }
}

/// Runs one session from `start`.
pub fn run_session(
    dec: &mut dyn SessionDecoder,
    model: &SynthNeuralModel,
    plan: &SessionPlan,
    cfg: &SimConfig,
    start: EffectorState,
) -> Result<SessionOutcome> {
    cfg.validate()?;
    plan.training.validate(&cfg.layout, &cfg.workspace)?;
    plan.test.validate(&cfg.layout, &cfg.workspace)?;
    if model.n_channels != cfg.features.n_channels || model.n_states() != cfg.layout.k() {
        return Err(arg_err!(
            "signal model has {} channels / {} states; config expects {} / {}",
            model.n_channels,
            model.n_states(),
            cfg.features.n_channels,
            cfg.layout.k()
        ));
    }
    let first = plan
        .training
        .tasks
        .first()
        .or(plan.test.tasks.first())
        .map_or(0, |t| t.state);
    let mut runner = Runner {
        cfg,
        model,
        extractor: CcwtExtractor::new(&cfg.features)?,
        buffer: EpochBuffer::new(&cfg.features),
        rng: ChaCha8Rng::seed_from_u64(plan.seed),
        sample_clock: 0,
        warm_samples: cfg.features.window_len() as u64,
        tick: 0,
        instructed_history: Vec::new(),
        effector: start,
        log: SessionLog { tick_s: cfg.tick_s(), k: cfg.layout.k(), output_dim: cfg.layout.output_dim, ..Default::default() },
        block_x: Vec::new(),
        block_y: Vec::new(),
        block_z: Vec::new(),
        phase_updates: 0,
    };
    let warm = runner.warm_samples as usize;
    runner.push_signal(first, &vec![0.0; cfg.layout.output_dim], warm)?;
    runner.run_phase(dec, Phase::Training, &plan.training)?;
    runner.run_phase(dec, Phase::Test, &plan.test)?;
    Ok(SessionOutcome { log: runner.log, effector: runner.effector })
}
