//! Session configuration: one TOML document describing the signal
//! generator, feature pipeline, decoder, schedules and seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gating::PriorSource;
use crate::mslm::DecoderConfig;
use crate::sim::effector::StateLayout;
use crate::sim::neural::GeneratorParams;
use crate::sim::session::SimConfig;
use crate::sim::task::ScheduleSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Root seed; schedules and per-session noise derive from it.
    pub seed: u64,
    /// Number of sessions, each a training phase followed by a test phase.
    pub sessions: usize,
    pub sim: SimConfig,
    pub decoder: DecoderConfig,
    pub generator: GeneratorParams,
    pub training: ScheduleSpec,
    pub test: ScheduleSpec,
    /// Random-walk runs for the chance baseline.
    pub chance_runs: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl SessionConfig {
    /// Three states, desk-scale features, moderate noise.
    pub fn standard() -> Self {
        Self {
            seed: 2024,
            sessions: 6,
            sim: SimConfig::desk(StateLayout::three_state()),
            decoder: DecoderConfig::three_state(),
            generator: GeneratorParams { noise: 2.0, seed: 11, ..GeneratorParams::default() },
            training: ScheduleSpec { cycles: 3, trials_per_task: 4, idle_ticks: 60 },
            test: ScheduleSpec { cycles: 2, trials_per_task: 4, idle_ticks: 60 },
            chance_runs: 100,
        }
    }

    /// The standard benchmark with weaker state signatures and more noise.
    /// Class priors come from the classifier's mean posterior: under this
    /// much noise, left-hand trials run long and label frequencies skew
    /// enough to lock the forward recursion out of the rarer states.
    pub fn noisy() -> Self {
        let mut c = Self::standard();
        c.generator.noise = 3.0;
        c.generator.signature_gain = 0.6;
        c.decoder.prior_source = PriorSource::PosteriorMean;
        c
    }

    /// Five states (both hands and both wrists), 8D output.
    pub fn five_state() -> Self {
        let mut c = Self::standard();
        c.sim = SimConfig::desk(StateLayout::five_state());
        c.decoder = DecoderConfig::five_state();
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "noisy" => Ok(Self::noisy()),
            "five_state" => Ok(Self::five_state()),
            other => Err(Error::Config(format!("unknown preset `{other}` (standard, noisy, five_state)"))),
        }
    }

    /// Cross-field checks. Errors name the offending key.
    pub fn check(&self) -> std::result::Result<(), (String, String)> {
        let wrap = |key: &str, e: Error| (key.to_string(), e.to_string());
        self.sim.features.validate().map_err(|e| wrap("sim.features", e))?;
        self.sim.workspace.validate().map_err(|e| wrap("sim.workspace", e))?;
        self.sim.assist.validate().map_err(|e| wrap("sim.assist", e))?;
        self.decoder.validate().map_err(|e| wrap("decoder.masks", e))?;
        let positive = [
            ("sim.block_len", self.sim.block_len as f64),
            ("sim.hit_radius", self.sim.hit_radius),
            ("sim.angle_hit", self.sim.angle_hit),
            ("sim.trial_timeout_s", self.sim.trial_timeout_s),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err((key.into(), format!("must be positive, got {v}")));
            }
        }
        self.sim.validate().map_err(|e| wrap("sim", e))?;
        let layout_masks = self.sim.layout.masks().map_err(|e| wrap("sim.layout", e))?;
        if layout_masks != self.decoder.masks || self.sim.layout.output_dim != self.decoder.output_dim {
            return Err((
                "decoder.masks".into(),
                format!("decoder masks {:?} do not match the state layout {:?}", self.decoder.masks, layout_masks),
            ));
        }
        if self.sessions == 0 {
            return Err(("sessions".into(), "at least one session is required".into()));
        }
        if self.chance_runs == 0 {
            return Err(("chance_runs".into(), "at least one chance run is required".into()));
        }
        if !(self.generator.noise >= 0.0 && self.generator.coupling >= 0.0) {
            return Err(("generator".into(), "noise and coupling must be non-negative".into()));
        }
        Ok(())
    }

    /// Parses and validates a TOML document. Syntax and type errors carry
    /// the parser's line and column; semantic errors point at the line of
    /// the offending key when it is present in the text.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let loc = e
                .span()
                .map(|s| {
                    let (line, col) = line_col(src, s.start);
                    format!("line {line}, column {col}: ")
                })
                .unwrap_or_default();
            Error::Config(format!("{loc}{}", e.message()))
        })?;
        cfg.check().map_err(|(key, msg)| match locate_key(src, &key) {
            Some(line) => Error::Config(format!("line {line}: `{key}`: {msg}")),
            None => Error::Config(format!("`{key}`: {msg}")),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml_str(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the parts of the configuration a trained decoder
    /// depends on: feature pipeline, state layout and decoder settings.
    pub fn fingerprint(&self) -> String {
        let relevant = serde_json::json!({
            "features": self.sim.features,
            "layout": self.sim.layout,
            "decoder": self.decoder,
        });
        let digest = Sha256::digest(relevant.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, str::len) + 1;
    (line, col)
}

/// 1-based line of a dotted key such as `sim.block_len`: the key's last
/// segment inside the table named by the rest, or the table header itself.
pub fn locate_key(src: &str, dotted: &str) -> Option<usize> {
    let (table, leaf) = match dotted.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", dotted),
    };
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == dotted {
                header_line = Some(i + 1);
            }
            continue;
        }
        let Some((key, _)) = line.split_once('=') else { continue };
        let key = key.trim();
        let full = if current.is_empty() { key.to_string() } else { format!("{current}.{key}") };
        if (current == table && key == leaf) || full == dotted {
            return Some(i + 1);
        }
    }
    header_line
}
