//! Multi-session closed-loop experiments driven by a [`SessionConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SessionConfig;
use crate::error::{Error, Result};
use crate::mslm::{DecodeResult, MslmDecoder};
use crate::tensor::Tensor;
use crate::sim::neural::SynthNeuralModel;
use crate::sim::session::{run_session, SessionLog, SessionPlan, SimConfig};
use crate::sim::task::TaskSchedule;

/// Which phases each session runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phases {
    Both,
    TrainingOnly,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub decoder: MslmDecoder,
    pub model: SynthNeuralModel,
    pub logs: Vec<SessionLog>,
}

pub fn new_decoder(cfg: &SessionConfig) -> Result<MslmDecoder> {
    MslmDecoder::new(cfg.decoder.clone(), &cfg.sim.features.shape())
}

/// The synthetic patient. It depends only on the generator seed, so it is
/// identical across sessions.
pub fn signal_model(cfg: &SessionConfig) -> Result<SynthNeuralModel> {
    SynthNeuralModel::new(&cfg.sim.features, &cfg.sim.layout, &cfg.generator)
}

fn session_seed(root: u64, index: usize) -> u64 {
    root.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Schedules and noise seed of session `index`.
pub fn plan_session(cfg: &SessionConfig, index: usize, phases: Phases) -> Result<SessionPlan> {
    let seed = session_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let training = TaskSchedule::generate(&cfg.sim.layout, &cfg.sim.workspace, &cfg.training, &mut rng)?;
    let test = match phases {
        Phases::Both => TaskSchedule::generate(&cfg.sim.layout, &cfg.sim.workspace, &cfg.test, &mut rng)?,
        Phases::TrainingOnly => TaskSchedule::default(),
    };
    Ok(SessionPlan { training, test, seed })
}

/// Runs `cfg.sessions` sessions in order, continuing from `decoder` when
/// given (zero-initialized otherwise). Every session starts from the
/// workspace's initial posture.
pub fn run_experiment(cfg: &SessionConfig, decoder: Option<MslmDecoder>, phases: Phases) -> Result<ExperimentOutcome> {
    run_experiment_with(cfg, decoder, phases, |_, _, _| Ok(()))
}

/// [`run_experiment`] with a hook called after each session with its index,
/// log and the decoder as it stands (frozen since the test phase began).
pub fn run_experiment_with(
    cfg: &SessionConfig,
    decoder: Option<MslmDecoder>,
    phases: Phases,
    mut on_session: impl FnMut(usize, &SessionLog, &MslmDecoder) -> Result<()>,
) -> Result<ExperimentOutcome> {
    cfg.check().map_err(|(key, msg)| Error::Config(format!("`{key}`: {msg}")))?;
    let model = signal_model(cfg)?;
    let mut decoder = match decoder {
        Some(d) => d,
        None => new_decoder(cfg)?,
    };
    let sim: SimConfig = cfg.sim.clone();
    let mut logs = Vec::with_capacity(cfg.sessions);
    for i in 0..cfg.sessions {
        let plan = plan_session(cfg, i, phases)?;
        let out = run_session(&mut decoder, &model, &plan, &sim, sim.workspace.initial_effector())?;
        log::info!("session {} done: {} ticks, {} updates", i + 1, out.log.ticks.len(), out.log.updates.len());
        on_session(i, &out.log, &decoder)?;
        logs.push(out.log);
    }
    Ok(ExperimentOutcome { decoder, model, logs })
}

/// Re-decodes a feature stream with a frozen copy of `decoder`, starting
/// from the initial belief as a test phase does.
pub fn replay(decoder: &MslmDecoder, features: &[Tensor]) -> Result<Vec<DecodeResult>> {
    let mut d = decoder.clone();
    d.gating_mut().reset_belief();
    features.iter().map(|x| d.decode(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::session::Phase;

    #[test]
    fn replay_reproduces_logged_outputs() {
        let mut cfg = SessionConfig::standard();
        cfg.sessions = 2;
        cfg.training.cycles = 1;
        cfg.test.cycles = 1;
        cfg.test.trials_per_task = 1;
        cfg.sim.record_features = true;
        let mut frozen = Vec::new();
        let out = run_experiment_with(&cfg, None, Phases::Both, |_, _, d| {
            frozen.push(d.clone());
            Ok(())
        })
        .unwrap();
        for (log, dec) in out.logs.iter().zip(&frozen) {
            let test = log.ticks_in(Phase::Test);
            let res = replay(dec, &log.features).unwrap();
            assert_eq!(res.len(), test.len());
            for (r, t) in res.iter().zip(test) {
                assert!(r.y_hat.iter().zip(&t.y_hat).all(|(a, b)| a.to_bits() == b.to_bits()));
                assert_eq!(r.state, t.decoded);
            }
        }
    }
}
