//! Dual-rate runtime: a decode loop at the tick rate and a calibration
//! loop that trains on complete blocks and publishes decoder snapshots.
//!
//! The decode loop owns the belief, the epoch buffer and the sink. It reads
//! the newest published decoder at every tick and never waits on training.
//! Labelled ticks are grouped into blocks of `block_len` and handed to the
//! calibration loop through a bounded queue that drops its oldest block
//! when full.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{arg_err, Error, Result};
use crate::features::{CcwtExtractor, EpochBuffer, FeatureConfig};
use crate::mslm::{DecodeResult, MslmDecoder};
use crate::sim::neural::SynthNeuralModel;
use crate::tensor::Tensor;

/// Raw input of one decode tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickInput {
    /// Frames received since the previous tick.
    pub frames: Vec<Vec<f64>>,
    /// Optimal output and instructed state, when the tick is labelled.
    pub label: Option<(Vec<f64>, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceEvent {
    Tick(TickInput),
    /// No data arrived in time; the tick is skipped.
    Underrun,
    End,
}

pub trait TickSource {
    fn next_tick(&mut self) -> Result<SourceEvent>;
}

pub trait DecodeSink {
    fn emit(&mut self, tick: u64, result: &DecodeResult) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl DecodeSink for Vec<(u64, DecodeResult)> {
    fn emit(&mut self, tick: u64, result: &DecodeResult) -> Result<()> {
        self.push((tick, result.clone()));
        Ok(())
    }
}

/// Writes one JSON object per decoded tick.
pub struct JsonlSink<W: Write> {
    inner: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

#[derive(Serialize)]
struct SinkLine<'a> {
    tick: u64,
    #[serde(flatten)]
    result: &'a DecodeResult,
}

impl<W: Write> DecodeSink for JsonlSink<W> {
    fn emit(&mut self, tick: u64, result: &DecodeResult) -> Result<()> {
        serde_json::to_writer(&mut self.inner, &SinkLine { tick, result })?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// Calibration runs inline as soon as a block is complete; no sleeping.
    /// Deterministic, used for tests and offline runs.
    LockStep,
    /// The decode loop ticks on a fixed schedule and calibration runs on its
    /// own thread.
    RealTime { period: Duration },
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub features: FeatureConfig,
    pub block_len: usize,
    /// Complete blocks the calibration queue holds before dropping the oldest.
    pub queue_blocks: usize,
    pub pacing: Pacing,
    /// Extra delay added to every calibration update, for stress tests.
    pub training_delay: Duration,
}

impl RuntimeConfig {
    pub fn lock_step(features: FeatureConfig, block_len: usize) -> Self {
        Self { features, block_len, queue_blocks: 4, pacing: Pacing::LockStep, training_delay: Duration::ZERO }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    /// Ticks that produced a decode result.
    pub decoded: u64,
    /// Ticks skipped on underrun or while the epoch buffer fills.
    pub skipped: u64,
    pub updates: u64,
    pub dropped_blocks: u64,
    /// Labelled samples left in an incomplete block at shutdown.
    pub dropped_samples: usize,
    /// Offset of every decode from the start of the run.
    pub tick_times: Vec<Duration>,
    /// Ticks at which a newly published decoder was first used.
    pub swaps: Vec<u64>,
    pub decoder: MslmDecoder,
}

impl RunReport {
    /// Largest deviation of an inter-tick interval from `period`.
    pub fn max_jitter(&self, period: Duration) -> Duration {
        self.tick_times
            .windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                if d > period {
                    d - period
                } else {
                    period - d
                }
            })
            .max()
            .unwrap_or(Duration::ZERO)
    }
}

struct Block {
    xs: Vec<Tensor>,
    ys: Vec<Vec<f64>>,
    zs: Vec<usize>,
}

#[derive(Default)]
struct QueueState {
    blocks: VecDeque<Block>,
    closed: bool,
    dropped: u64,
}

struct Shared {
    snapshot: ArcSwap<MslmDecoder>,
    queue: Mutex<QueueState>,
    ready: Condvar,
    updates: AtomicU64,
    delay: Duration,
}

impl Shared {
    fn train(&self, block: &Block) -> Result<()> {
        let mut next = MslmDecoder::clone(&self.snapshot.load());
        next.calibrate_update(&block.xs, &block.ys, &block.zs)?;
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        self.snapshot.store(Arc::new(next));
        self.updates.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn calibration_loop(&self) -> Result<()> {
        loop {
            let block = {
                let mut q = self.queue.lock().expect("queue lock");
                loop {
                    if let Some(b) = q.blocks.pop_front() {
                        break b;
                    }
                    if q.closed {
                        return Ok(());
                    }
                    q = self.ready.wait(q).expect("queue lock");
                }
            };
            self.train(&block)?;
        }
    }

    fn enqueue(&self, block: Block, capacity: usize) {
        let mut q = self.queue.lock().expect("queue lock");
        if q.blocks.len() >= capacity {
            q.blocks.pop_front();
            q.dropped += 1;
            log::warn!("calibration queue full; dropped the oldest block");
        }
        q.blocks.push_back(block);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.queue.lock().expect("queue lock").closed = true;
        self.ready.notify_all();
    }
}

/// Runs the decode and calibration loops until the source ends, then
/// drains the calibration queue and flushes the sink.
pub fn run(
    decoder: MslmDecoder,
    source: &mut dyn TickSource,
    sink: &mut dyn DecodeSink,
    cfg: &RuntimeConfig,
) -> Result<RunReport> {
    if cfg.block_len == 0 || cfg.queue_blocks == 0 {
        return Err(arg_err!("block length and queue capacity must be positive"));
    }
    if decoder.x_shape() != cfg.features.shape() {
        return Err(arg_err!("decoder expects features {:?}, pipeline gives {:?}", decoder.x_shape(), cfg.features.shape()));
    }
    let extractor = CcwtExtractor::new(&cfg.features)?;
    let shared = Shared {
        snapshot: ArcSwap::from_pointee(decoder),
        queue: Mutex::new(QueueState::default()),
        ready: Condvar::new(),
        updates: AtomicU64::new(0),
        delay: cfg.training_delay,
    };
    match cfg.pacing {
        Pacing::LockStep => decode_loop(&shared, &extractor, source, sink, cfg, None),
        Pacing::RealTime { period } => std::thread::scope(|s| {
            let worker = s.spawn(|| shared.calibration_loop());
            let res = decode_loop(&shared, &extractor, source, sink, cfg, Some(period));
            shared.close();
            let trained = worker.join().map_err(|_| Error::Numeric("calibration thread panicked".into()))?;
            let mut report = res?;
            trained?;
            report.updates = shared.updates.load(Ordering::SeqCst);
            report.decoder = MslmDecoder::clone(&shared.snapshot.load());
            Ok(report)
        }),
    }
}

fn decode_loop(
    shared: &Shared,
    extractor: &CcwtExtractor,
    source: &mut dyn TickSource,
    sink: &mut dyn DecodeSink,
    cfg: &RuntimeConfig,
    period: Option<Duration>,
) -> Result<RunReport> {
    let mut buffer = EpochBuffer::new(&cfg.features);
    let mut current = shared.snapshot.load_full();
    let mut gamma = current.gating().pi().to_vec();
    let mut pending = Block { xs: Vec::new(), ys: Vec::new(), zs: Vec::new() };
    let mut report = RunReport {
        decoded: 0,
        skipped: 0,
        updates: 0,
        dropped_blocks: 0,
        dropped_samples: 0,
        tick_times: Vec::new(),
        swaps: Vec::new(),
        decoder: MslmDecoder::clone(&current),
    };
    let start = Instant::now();
    let mut tick: u64 = 0;
    loop {
        if let Some(p) = period {
            let deadline = start + p * tick as u32;
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            }
        }
        let input = match source.next_tick()? {
            SourceEvent::End => break,
            SourceEvent::Underrun => {
                log::warn!("source underrun at tick {tick}; skipped");
                report.skipped += 1;
                tick += 1;
                continue;
            }
            SourceEvent::Tick(input) => input,
        };
        for frame in input.frames {
            buffer.push(frame)?;
        }
        if !buffer.is_ready() {
            report.skipped += 1;
            tick += 1;
            continue;
        }
        let x = extractor.features(&buffer.window()?)?;
        let newest = shared.snapshot.load_full();
        if !Arc::ptr_eq(&newest, &current) {
            current = newest;
            report.swaps.push(tick);
            if current.k() != gamma.len() {
                gamma = current.gating().pi().to_vec();
            }
        }
        report.tick_times.push(start.elapsed());
        let result = current.decode_with(&x, &mut gamma)?;
        sink.emit(tick, &result)?;
        report.decoded += 1;
        if let Some((y, z)) = input.label {
            pending.xs.push(x);
            pending.ys.push(y);
            pending.zs.push(z);
            if pending.xs.len() == cfg.block_len {
                let block = std::mem::replace(&mut pending, Block { xs: Vec::new(), ys: Vec::new(), zs: Vec::new() });
                match period {
                    None => shared.train(&block)?,
                    Some(_) => shared.enqueue(block, cfg.queue_blocks),
                }
            }
        }
        tick += 1;
    }
    sink.flush()?;
    report.dropped_samples = pending.xs.len();
    report.dropped_blocks = shared.queue.lock().expect("queue lock").dropped;
    report.updates = shared.updates.load(Ordering::SeqCst);
    report.decoder = MslmDecoder::clone(&shared.snapshot.load());
    Ok(report)
}

/// Labelled ticks from the synthetic generator following a fixed script of
/// `(state, y_opt)` pairs; `y_opt` doubles as the generator's intention.
pub struct SimulatedSource {
    model: SynthNeuralModel,
    script: Vec<(usize, Vec<f64>)>,
    sample_rate: f64,
    tick_s: f64,
    next: usize,
    clock: u64,
    labelled: bool,
    rng: ChaCha8Rng,
}

impl SimulatedSource {
    pub fn new(model: SynthNeuralModel, features: &FeatureConfig, script: Vec<(usize, Vec<f64>)>, seed: u64) -> Self {
        Self {
            model,
            script,
            sample_rate: features.sample_rate,
            tick_s: features.slide_s,
            next: 0,
            clock: 0,
            labelled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Emits unlabelled ticks (decode only).
    pub fn unlabelled(mut self) -> Self {
        self.labelled = false;
        self
    }

    /// Frames up to the end of tick `i`, rounded on cumulative time.
    fn samples_until(&self, i: usize) -> u64 {
        ((i + 1) as f64 * self.tick_s * self.sample_rate).round() as u64
    }
}

impl TickSource for SimulatedSource {
    fn next_tick(&mut self) -> Result<SourceEvent> {
        let Some((state, y)) = self.script.get(self.next).cloned() else {
            return Ok(SourceEvent::End);
        };
        let end = self.samples_until(self.next);
        let n = (end - self.clock) as usize;
        let frames = self.model.synth_neural(state, &y, self.clock, n, &mut self.rng)?;
        self.clock = end;
        self.next += 1;
        let label = self.labelled.then_some((y, state));
        Ok(SourceEvent::Tick(TickInput { frames, label }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SessionConfig;
    use crate::experiment::{new_decoder, signal_model};

    fn script(ticks: usize) -> Vec<(usize, Vec<f64>)> {
        (0..ticks)
            .map(|i| {
                let state = (i / 40) % 3;
                let mut y = vec![0.0; 6];
                if state > 0 {
                    y[(state - 1) * 3] = 1.0;
                }
                (state, y)
            })
            .collect()
    }

    /// Injects underruns at the listed calls.
    struct Gappy {
        inner: SimulatedSource,
        calls: usize,
        gaps: Vec<usize>,
    }

    impl TickSource for Gappy {
        fn next_tick(&mut self) -> Result<SourceEvent> {
            self.calls += 1;
            if self.gaps.contains(&self.calls) {
                return Ok(SourceEvent::Underrun);
            }
            self.inner.next_tick()
        }
    }

    #[test]
    fn lock_step_block_count() {
        let cfg = SessionConfig::standard();
        let model = signal_model(&cfg).unwrap();
        let features = cfg.sim.features.clone();
        // the epoch buffer needs window/slide - 1 ticks before the first decode
        let warmup = (features.window_len() / features.slide_len()) - 1;
        let mut src = SimulatedSource::new(model, &features, script(1500 + warmup), 1);
        let mut sink = Vec::new();
        let rt = RuntimeConfig::lock_step(features, 150);
        let report = run(new_decoder(&cfg).unwrap(), &mut src, &mut sink, &rt).unwrap();
        assert_eq!(report.decoded, 1500);
        assert_eq!(report.updates, 10);
        assert_eq!(report.decoder.updates(), 10);
        assert_eq!(report.dropped_samples, 0);
        assert_eq!(report.swaps.len(), 9);
    }

    #[test]
    fn gamma_is_carried_across_swaps() {
        let cfg = SessionConfig::standard();
        let features = cfg.sim.features.clone();
        let mut src = SimulatedSource::new(signal_model(&cfg).unwrap(), &features, script(400), 2);
        let mut sink: Vec<(u64, DecodeResult)> = Vec::new();
        let report = run(new_decoder(&cfg).unwrap(), &mut src, &mut sink, &RuntimeConfig::lock_step(features, 50)).unwrap();
        assert_eq!(report.swaps.len(), 7);
        for (_, r) in &sink {
            assert!((r.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // the last swap installs the final decoder; its first step must start
        // from the belief left by the previous tick, not from pi
        let swap = *report.swaps.last().unwrap();
        let i = sink.iter().position(|(t, _)| *t == swap).unwrap();
        let (prev, cur) = (&sink[i - 1].1, &sink[i].1);
        let expected = report.decoder.gating().forward_from(&prev.gamma, &cur.posterior).unwrap();
        assert_eq!(cur.gamma, expected);
        let from_pi = report.decoder.gating().forward_from(report.decoder.gating().pi(), &cur.posterior).unwrap();
        assert_ne!(cur.gamma, from_pi);
    }

    #[test]
    fn underruns_skip_ticks() {
        let cfg = SessionConfig::standard();
        let features = cfg.sim.features.clone();
        let inner = SimulatedSource::new(signal_model(&cfg).unwrap(), &features, script(60), 3).unlabelled();
        let mut src = Gappy { inner, calls: 0, gaps: vec![20, 30] };
        let mut sink = Vec::new();
        let report = run(new_decoder(&cfg).unwrap(), &mut src, &mut sink, &RuntimeConfig::lock_step(features, 10)).unwrap();
        let warmup = 9;
        assert_eq!(report.decoded, 60 - warmup);
        assert_eq!(report.skipped, warmup + 2);
        assert_eq!(report.updates, 0);
    }

    #[test]
    fn full_queue_drops_oldest_block() {
        let cfg = SessionConfig::standard();
        let features = cfg.sim.features.clone();
        let mut src = SimulatedSource::new(signal_model(&cfg).unwrap(), &features, script(69), 4);
        let mut sink = Vec::new();
        let rt = RuntimeConfig {
            features,
            block_len: 10,
            queue_blocks: 1,
            pacing: Pacing::RealTime { period: Duration::from_millis(1) },
            training_delay: Duration::from_millis(200),
        };
        let report = run(new_decoder(&cfg).unwrap(), &mut src, &mut sink, &rt).unwrap();
        // 60 labelled decodes give 6 blocks; training is far slower than
        // decoding, so some are dropped and every kept block is trained
        assert_eq!(report.decoded, 60);
        assert!(report.dropped_blocks >= 1);
        assert_eq!(report.updates + report.dropped_blocks, 6);
    }

    #[test]
    fn jsonl_sink_writes_one_line_per_tick() {
        let cfg = SessionConfig::standard();
        let features = cfg.sim.features.clone();
        let mut src = SimulatedSource::new(signal_model(&cfg).unwrap(), &features, script(15), 5);
        let mut sink = JsonlSink::new(Vec::new());
        run(new_decoder(&cfg).unwrap(), &mut src, &mut sink, &RuntimeConfig::lock_step(features, 10)).unwrap();
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().next().unwrap().starts_with("{\"tick\":9,"));
    }
}
