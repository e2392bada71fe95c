//! Effector kinematics: two 3D hands and two 1D wrists.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// A controllable degree-of-freedom group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limb {
    LeftHand,
    RightHand,
    LeftWrist,
    RightWrist,
}

impl Limb {
    pub fn is_translation(self) -> bool {
        matches!(self, Limb::LeftHand | Limb::RightHand)
    }

    /// Output components of this limb in a 6D or 8D output vector.
    ///
    /// 6D: left xyz, right xyz. 8D: left xyz, left wrist, right xyz, right wrist.
    pub fn components(self, output_dim: usize) -> Result<Vec<usize>> {
        match (output_dim, self) {
            (6, Limb::LeftHand) => Ok(vec![0, 1, 2]),
            (6, Limb::RightHand) => Ok(vec![3, 4, 5]),
            (8, Limb::LeftHand) => Ok(vec![0, 1, 2]),
            (8, Limb::LeftWrist) => Ok(vec![3]),
            (8, Limb::RightHand) => Ok(vec![4, 5, 6]),
            (8, Limb::RightWrist) => Ok(vec![7]),
            _ => Err(arg_err!("{self:?} has no components in a {output_dim}D output")),
        }
    }
}

/// Which limb (if any) each state controls.
///
/// Serialized as state names (`idle`, `left_hand`, `right_hand`,
/// `left_wrist`, `right_wrist`) plus the output dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct StateLayout {
    pub limbs: Vec<Option<Limb>>,
    pub output_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutRepr {
    states: Vec<String>,
    output_dim: usize,
}

impl TryFrom<LayoutRepr> for StateLayout {
    type Error = String;

    fn try_from(r: LayoutRepr) -> std::result::Result<Self, String> {
        let limbs = r
            .states
            .iter()
            .map(|s| match s.as_str() {
                "idle" => Ok(None),
                "left_hand" => Ok(Some(Limb::LeftHand)),
                "right_hand" => Ok(Some(Limb::RightHand)),
                "left_wrist" => Ok(Some(Limb::LeftWrist)),
                "right_wrist" => Ok(Some(Limb::RightWrist)),
                other => Err(format!("unknown state `{other}`")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let layout = StateLayout { limbs, output_dim: r.output_dim };
        layout.masks().map_err(|e| e.to_string())?;
        Ok(layout)
    }
}

impl From<StateLayout> for LayoutRepr {
    fn from(l: StateLayout) -> Self {
        let states = l
            .limbs
            .iter()
            .map(|l| match l {
                None => "idle",
                Some(Limb::LeftHand) => "left_hand",
                Some(Limb::RightHand) => "right_hand",
                Some(Limb::LeftWrist) => "left_wrist",
                Some(Limb::RightWrist) => "right_wrist",
            })
            .map(String::from)
            .collect();
        LayoutRepr { states, output_dim: l.output_dim }
    }
}

impl StateLayout {
    /// Idle, left hand, right hand.
    pub fn three_state() -> Self {
        Self { limbs: vec![None, Some(Limb::LeftHand), Some(Limb::RightHand)], output_dim: 6 }
    }

    /// Idle, left hand, right hand, left wrist, right wrist.
    pub fn five_state() -> Self {
        Self {
            limbs: vec![
                None,
                Some(Limb::LeftHand),
                Some(Limb::RightHand),
                Some(Limb::LeftWrist),
                Some(Limb::RightWrist),
            ],
            output_dim: 8,
        }
    }

    pub fn k(&self) -> usize {
        self.limbs.len()
    }

    pub fn limb(&self, state: usize) -> Option<Limb> {
        self.limbs.get(state).copied().flatten()
    }

    pub fn masks(&self) -> Result<Vec<Vec<usize>>> {
        self.limbs
            .iter()
            .map(|l| l.map_or(Ok(Vec::new()), |l| l.components(self.output_dim)))
            .collect()
    }

    pub fn state_of(&self, limb: Limb) -> Option<usize> {
        self.limbs.iter().position(|l| *l == Some(limb))
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| p[i].clamp(self.min[i], self.max[i]))
    }

    pub fn diameter(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn wrap_degrees(a: f64) -> f64 {
    (a + 180.0).rem_euclid(360.0) - 180.0
}

/// Shortest signed arc from `from` to `to`, in degrees.
pub fn angle_difference(from: f64, to: f64) -> f64 {
    wrap_degrees(to - from)
}

pub(crate) fn norm3(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Scales `v` down to norm `cap` when longer.
pub(crate) fn clip_norm(v: &mut [f64], cap: f64) {
    let n = norm3(v);
    if n > cap && n > 0.0 {
        let s = cap / n;
        for a in v {
            *a *= s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectorState {
    pub left_pos: [f64; 3],
    pub right_pos: [f64; 3],
    /// Degrees in `[-180, 180)`.
    pub left_angle: f64,
    pub right_angle: f64,
    pub left_bounds: Bounds,
    pub right_bounds: Bounds,
    /// Maximum hand displacement per tick (meters).
    pub max_speed: f64,
    /// Maximum wrist rotation per tick (degrees).
    pub max_angular_speed: f64,
}

impl EffectorState {
    pub fn position(&self, limb: Limb) -> Option<[f64; 3]> {
        match limb {
            Limb::LeftHand => Some(self.left_pos),
            Limb::RightHand => Some(self.right_pos),
            _ => None,
        }
    }

    pub fn angle(&self, limb: Limb) -> Option<f64> {
        match limb {
            Limb::LeftWrist => Some(self.left_angle),
            Limb::RightWrist => Some(self.right_angle),
            _ => None,
        }
    }

    /// Applies an output increment: each limb block is clipped to its speed
    /// cap, positions are clamped to the workspace and angles wrapped.
    pub fn step(&self, y: &[f64]) -> Result<EffectorState> {
        let mut next = self.clone();
        let hands: &[(Limb, usize)] = match y.len() {
            6 => &[(Limb::LeftHand, 0), (Limb::RightHand, 3)],
            8 => &[(Limb::LeftHand, 0), (Limb::RightHand, 4)],
            n => return Err(arg_err!("output increment of length {n}; expected 6 or 8")),
        };
        for &(limb, off) in hands {
            let mut d = [y[off], y[off + 1], y[off + 2]];
            clip_norm(&mut d, self.max_speed);
            let (pos, bounds) = match limb {
                Limb::LeftHand => (&mut next.left_pos, &self.left_bounds),
                _ => (&mut next.right_pos, &self.right_bounds),
            };
            *pos = bounds.clamp(std::array::from_fn(|i| pos[i] + d[i]));
        }
        if y.len() == 8 {
            let cap = self.max_angular_speed;
            next.left_angle = wrap_degrees(self.left_angle + y[3].clamp(-cap, cap));
            next.right_angle = wrap_degrees(self.right_angle + y[7].clamp(-cap, cap));
        }
        Ok(next)
    }
}
