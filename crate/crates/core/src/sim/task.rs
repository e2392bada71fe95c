//! Point-to-point pursuit schedules and target sets.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::features::Target;
use crate::sim::effector::{Bounds, EffectorState, Limb, StateLayout};

/// Two cubic target regions, one per hand, plus the kinematic limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workspace {
    pub left_center: [f64; 3],
    pub right_center: [f64; 3],
    /// Half side of each target cube (meters).
    pub half_side: f64,
    /// Extra room around each cube that the hand may reach.
    pub margin: f64,
    /// Wrist targets (degrees).
    pub wrist_targets: Vec<f64>,
    pub max_speed: f64,
    pub max_angular_speed: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            left_center: [-0.2, 0.3, 0.0],
            right_center: [0.2, 0.3, 0.0],
            half_side: 0.1,
            margin: 0.05,
            wrist_targets: vec![-90.0, -60.0, -30.0, 30.0, 60.0, 90.0],
            max_speed: 0.01,
            max_angular_speed: 5.0,
        }
    }
}

impl Workspace {
    pub fn center(&self, limb: Limb) -> Option<[f64; 3]> {
        match limb {
            Limb::LeftHand => Some(self.left_center),
            Limb::RightHand => Some(self.right_center),
            _ => None,
        }
    }

    pub fn bounds(&self, limb: Limb) -> Option<Bounds> {
        let c = self.center(limb)?;
        let r = self.half_side + self.margin;
        Some(Bounds { min: std::array::from_fn(|i| c[i] - r), max: std::array::from_fn(|i| c[i] + r) })
    }

    /// The 11 targets of one hand: 8 cube corners, the center and the
    /// centers of the top and bottom faces.
    pub fn hand_targets(&self, limb: Limb) -> Option<Vec<[f64; 3]>> {
        let c = self.center(limb)?;
        let h = self.half_side;
        let mut out = Vec::with_capacity(11);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out.push([c[0] + sx * h, c[1] + sy * h, c[2] + sz * h]);
                }
            }
        }
        out.push(c);
        out.push([c[0], c[1], c[2] + h]);
        out.push([c[0], c[1], c[2] - h]);
        Some(out)
    }

    /// Hands at their cube centers, wrists at 0 degrees.
    pub fn initial_effector(&self) -> EffectorState {
        EffectorState {
            left_pos: self.left_center,
            right_pos: self.right_center,
            left_angle: 0.0,
            right_angle: 0.0,
            left_bounds: self.bounds(Limb::LeftHand).expect("hand"),
            right_bounds: self.bounds(Limb::RightHand).expect("hand"),
            max_speed: self.max_speed,
            max_angular_speed: self.max_angular_speed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_side > 0.0 && self.margin >= 0.0 && self.max_speed > 0.0 && self.max_angular_speed > 0.0) {
            return Err(arg_err!("workspace sizes and speeds must be positive"));
        }
        if self.wrist_targets.iter().any(|a| !(-180.0..180.0).contains(a)) {
            return Err(arg_err!("wrist targets must lie in [-180, 180)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Hold a state (typically idle) for a fixed number of ticks.
    Hold { ticks: usize },
    /// Successive reaching trials; each ends on hit or timeout.
    Trials { targets: Vec<Target> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub state: usize,
    #[serde(flatten)]
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<Task>,
}

/// Shape of a generated schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// How many times every active state is visited.
    pub cycles: usize,
    pub trials_per_task: usize,
    /// Idle hold inserted before every active task (0 disables).
    pub idle_ticks: usize,
}

impl TaskSchedule {
    /// Validates labels, target limbs and target placement.
    pub fn validate(&self, layout: &StateLayout, ws: &Workspace) -> Result<()> {
        for (i, task) in self.tasks.iter().enumerate() {
            if task.state >= layout.k() {
                return Err(arg_err!("task {i}: state {} outside 0..{}", task.state, layout.k()));
            }
            let TaskKind::Trials { targets } = &task.kind else { continue };
            let Some(limb) = layout.limb(task.state) else {
                return Err(arg_err!("task {i}: trials given for idle state {}", task.state));
            };
            for t in targets {
                if t.limb() != Some(limb) {
                    return Err(arg_err!("task {i}: target {t:?} does not belong to {limb:?}"));
                }
                match *t {
                    Target::Point { pos, .. } => {
                        let b = ws.bounds(limb).ok_or_else(|| arg_err!("task {i}: {limb:?} has no workspace"))?;
                        if !b.contains(&pos) {
                            return Err(arg_err!("task {i}: target {pos:?} outside the workspace"));
                        }
                    }
                    Target::Angle { deg, .. } if !(-180.0..180.0).contains(&deg) => {
                        return Err(arg_err!("task {i}: angle {deg} outside [-180, 180)"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Alternating schedule: every active state in layout order, each
    /// preceded by an idle hold, repeated `cycles` times. Consecutive
    /// targets of one limb never repeat.
    pub fn generate<R: Rng + ?Sized>(layout: &StateLayout, ws: &Workspace, spec: &ScheduleSpec, rng: &mut R) -> Result<Self> {
        let idle = (0..layout.k()).find(|&s| layout.limb(s).is_none());
        let mut tasks = Vec::new();
        let mut last: Vec<Option<usize>> = vec![None; layout.k()];
        for _ in 0..spec.cycles {
            for state in 0..layout.k() {
                let Some(limb) = layout.limb(state) else { continue };
                if let (Some(idle), true) = (idle, spec.idle_ticks > 0) {
                    tasks.push(Task { state: idle, kind: TaskKind::Hold { ticks: spec.idle_ticks } });
                }
                let pool: Vec<Target> = if limb.is_translation() {
                    ws.hand_targets(limb)
                        .expect("hand")
                        .into_iter()
                        .map(|pos| Target::Point { limb, pos })
                        .collect()
                } else {
                    ws.wrist_targets.iter().map(|&deg| Target::Angle { limb, deg }).collect()
                };
                if pool.len() < 2 {
                    return Err(arg_err!("{limb:?} needs at least two targets"));
                }
                let mut targets = Vec::with_capacity(spec.trials_per_task);
                for _ in 0..spec.trials_per_task {
                    let choices: Vec<usize> = (0..pool.len()).filter(|&i| Some(i) != last[state]).collect();
                    let &i = choices.choose(rng).expect("non-empty");
                    last[state] = Some(i);
                    targets.push(pool[i]);
                }
                tasks.push(Task { state, kind: TaskKind::Trials { targets } });
            }
        }
        Ok(Self { tasks })
    }

    pub fn n_trials(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| match &t.kind {
                TaskKind::Trials { targets } => targets.len(),
                TaskKind::Hold { .. } => 0,
            })
            .sum()
    }
}
