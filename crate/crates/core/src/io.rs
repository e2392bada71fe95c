//! On-disk formats: model archives, JSON-lines session logs, trial and
//! report CSVs, feature streams and raw frame streams. The byte-level
//! layouts are described in `docs/formats.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SessionConfig;
use crate::error::{Error, Result};
use crate::features::Target;
use crate::metrics::IndicatorReport;
use crate::mslm::MslmDecoder;
use crate::sim::effector::Limb;
use crate::sim::session::{Phase, SessionLog, TickRecord, TrialRecord};
use crate::tensor::Tensor;

pub const ARCHIVE_FORMAT: &str = "rew-mslm-model";
pub const ARCHIVE_VERSION: u32 = 1;
pub const LOG_FORMAT: &str = "rew-mslm-log";
pub const LOG_VERSION: u32 = 1;
pub const FRAME_MAGIC: [u8; 4] = *b"FRMS";
pub const FRAME_VERSION: u32 = 1;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub updates: u64,
    pub sessions: usize,
    pub seed: u64,
}

/// A trained decoder together with the fingerprint of the configuration
/// it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub provenance: Provenance,
    pub decoder: MslmDecoder,
}

impl ModelArchive {
    pub fn new(decoder: MslmDecoder, cfg: &SessionConfig, sessions: usize) -> Self {
        Self {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            fingerprint: cfg.fingerprint(),
            provenance: Provenance { updates: decoder.updates(), sessions, seed: cfg.seed },
            decoder,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses an archive, checking the format tag and version before the
    /// decoder payload.
    pub fn from_json(src: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(src)?;
        let format = value.get("format").and_then(|v| v.as_str());
        if format != Some(ARCHIVE_FORMAT) {
            return Err(Error::Archive(format!("not a model archive (format {format:?})")));
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(ARCHIVE_VERSION as u64) {
            return Err(Error::Archive(format!(
                "unsupported archive version {version:?}, this build reads {ARCHIVE_VERSION}"
            )));
        }
        // reparse from text rather than from `value` so floats keep the
        // exact round-trip path
        Ok(serde_json::from_str(src)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_json(&src).map_err(|e| match e {
            Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails when the archive was trained under a different feature,
    /// layout or decoder configuration, unless `allow_mismatch` is set.
    pub fn check_fingerprint(&self, cfg: &SessionConfig, allow_mismatch: bool) -> Result<()> {
        let expected = cfg.fingerprint();
        if self.fingerprint == expected {
            return Ok(());
        }
        if allow_mismatch {
            log::warn!("model fingerprint {} differs from config {expected}; continuing", self.fingerprint);
            return Ok(());
        }
        Err(Error::Archive(format!(
            "model fingerprint {} does not match the configuration ({expected})",
            self.fingerprint
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogHeader {
    format: String,
    version: u32,
    tick_s: f64,
    k: usize,
    output_dim: usize,
    updates: Vec<u64>,
    dropped_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Session(LogHeader),
    Tick(TickRecord),
    Trial(TrialRecord),
}

/// Writes a session log as JSON lines: one `session` header, then every
/// `tick`, then every `trial`. Recorded features are not included.
pub fn write_log_jsonl<W: Write>(log: &SessionLog, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let header = LogHeader {
        format: LOG_FORMAT.into(),
        version: LOG_VERSION,
        tick_s: log.tick_s,
        k: log.k,
        output_dim: log.output_dim,
        updates: log.updates.clone(),
        dropped_samples: log.dropped_samples,
    };
    serde_json::to_writer(&mut w, &LogLine::Session(header))?;
    w.write_all(b"\n")?;
    for t in &log.ticks {
        serde_json::to_writer(&mut w, &LogLine::Tick(t.clone()))?;
        w.write_all(b"\n")?;
    }
    for t in &log.trials {
        serde_json::to_writer(&mut w, &LogLine::Trial(t.clone()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_jsonl<R: Read>(r: R) -> Result<SessionLog> {
    let mut log = SessionLog::default();
    let mut seen_header = false;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("log line {}: {e}", i + 1)))?;
        match parsed {
            LogLine::Session(h) => {
                if seen_header {
                    return Err(Error::Data(format!("log line {}: second session header", i + 1)));
                }
                if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                    return Err(Error::Data(format!("unsupported log {} v{}", h.format, h.version)));
                }
                seen_header = true;
                log.tick_s = h.tick_s;
                log.k = h.k;
                log.output_dim = h.output_dim;
                log.updates = h.updates;
                log.dropped_samples = h.dropped_samples;
            }
            _ if !seen_header => {
                return Err(Error::Data(format!("log line {}: record before the session header", i + 1)));
            }
            LogLine::Tick(t) => log.ticks.push(t),
            LogLine::Trial(t) => log.trials.push(t),
        }
    }
    if !seen_header {
        return Err(Error::Data("log has no session header".into()));
    }
    Ok(log)
}

pub fn save_log(log: &SessionLog, path: &Path) -> Result<()> {
    write_log_jsonl(log, File::create(path)?)
}

pub fn load_log(path: &Path) -> Result<SessionLog> {
    read_log_jsonl(File::open(path)?)
}

/// One row of the per-trial CSV summary. Point targets fill `target_x..z`,
/// angle targets fill `target_deg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub phase: Phase,
    pub task: usize,
    pub state: usize,
    pub limb: Limb,
    pub target_x: Option<f64>,
    pub target_y: Option<f64>,
    pub target_z: Option<f64>,
    pub target_deg: Option<f64>,
    pub start_tick: u64,
    pub end_tick: u64,
    pub start_distance: f64,
    pub end_distance: f64,
    pub path_length: f64,
    pub duration_s: f64,
    pub hit: bool,
}

impl From<&TrialRecord> for TrialRow {
    fn from(t: &TrialRecord) -> Self {
        let (pos, deg) = match t.target {
            Target::Point { pos, .. } => (Some(pos), None),
            Target::Angle { deg, .. } => (None, Some(deg)),
            Target::None => (None, None),
        };
        Self {
            phase: t.phase,
            task: t.task,
            state: t.state,
            limb: t.limb,
            target_x: pos.map(|p| p[0]),
            target_y: pos.map(|p| p[1]),
            target_z: pos.map(|p| p[2]),
            target_deg: deg,
            start_tick: t.start_tick,
            end_tick: t.end_tick,
            start_distance: t.start_distance,
            end_distance: t.end_distance,
            path_length: t.path_length,
            duration_s: t.duration_s,
            hit: t.hit,
        }
    }
}

impl TrialRow {
    pub fn to_record(&self) -> TrialRecord {
        let target = match (self.target_x, self.target_y, self.target_z, self.target_deg) {
            (Some(x), Some(y), Some(z), _) => Target::Point { limb: self.limb, pos: [x, y, z] },
            (_, _, _, Some(deg)) => Target::Angle { limb: self.limb, deg },
            _ => Target::None,
        };
        TrialRecord {
            phase: self.phase,
            task: self.task,
            state: self.state,
            limb: self.limb,
            target,
            start_tick: self.start_tick,
            end_tick: self.end_tick,
            start_distance: self.start_distance,
            end_distance: self.end_distance,
            path_length: self.path_length,
            duration_s: self.duration_s,
            hit: self.hit,
        }
    }
}

pub fn write_trials_csv<W: Write>(trials: &[TrialRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for t in trials {
        out.serialize(TrialRow::from(t))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trials_csv<R: Read>(r: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize::<TrialRow>().map(|row| Ok(row?.to_record())).collect()
}

/// Writes reports as a CSV table: a `session` column followed by the
/// report's flat indicators. Undefined values are written as `NaN`.
pub fn write_report_csv<W: Write>(reports: &[IndicatorReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let Some(first) = reports.first() else {
        out.flush()?;
        return Ok(());
    };
    let keys: Vec<String> = first.flat().into_iter().map(|(k, _)| k).collect();
    let mut header = vec!["session".to_string()];
    header.extend(keys.iter().cloned());
    out.write_record(&header)?;
    for (i, r) in reports.iter().enumerate() {
        let flat = r.flat();
        if flat.iter().map(|(k, _)| k).ne(keys.iter()) {
            return Err(Error::Data(format!("report {i} has different indicators than report 0")));
        }
        let mut row = vec![(i + 1).to_string()];
        row.extend(flat.into_iter().map(|(_, v)| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Feature stream: concatenated TNSR records.
pub fn write_features<W: Write>(features: &[Tensor], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for x in features {
        x.write_binary(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(r: R) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(r);
    let mut out = Vec::new();
    while let Some(x) = Tensor::read_binary(&mut r)? {
        if let Some(first) = out.first().map(Tensor::shape) {
            if first != x.shape() {
                return Err(Error::Data(format!("feature {} has shape {:?}, expected {first:?}", out.len(), x.shape())));
            }
        }
        out.push(x);
    }
    Ok(out)
}

/// One multichannel sample of the raw signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub values: Vec<f64>,
}

/// Writes the binary frame stream header.
pub fn write_frame_header<W: Write>(w: &mut W, n_channels: usize, sample_rate: f64) -> Result<()> {
    w.write_all(&FRAME_MAGIC)?;
    w.write_u32::<LittleEndian>(FRAME_VERSION)?;
    w.write_u32::<LittleEndian>(n_channels as u32)?;
    w.write_f64::<LittleEndian>(sample_rate)?;
    Ok(())
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_f64::<LittleEndian>(frame.t)?;
    for &v in &frame.values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Streaming reader of the binary frame format.
pub struct FrameReader<R: Read> {
    inner: R,
    n_channels: usize,
    sample_rate: f64,
}

impl<R: Read> FrameReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic)?;
        if magic != FRAME_MAGIC {
            return Err(Error::Data(format!("bad frame stream magic {magic:?}")));
        }
        let version = inner.read_u32::<LittleEndian>()?;
        if version != FRAME_VERSION {
            return Err(Error::Data(format!("unsupported frame stream version {version}")));
        }
        let n_channels = inner.read_u32::<LittleEndian>()? as usize;
        let sample_rate = inner.read_f64::<LittleEndian>()?;
        if n_channels == 0 || !(sample_rate > 0.0) {
            return Err(Error::Data("frame stream needs channels and a positive sample rate".into()));
        }
        Ok(Self { inner, n_channels, sample_rate })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Next frame; `Ok(None)` at a clean end, an error on a partial frame.
    pub fn next_frame(&mut self) -> Result<Option<Frame>> {
        let t = match self.inner.read_f64::<LittleEndian>() {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut values = vec![0.0; self.n_channels];
        self.inner
            .read_f64_into::<LittleEndian>(&mut values)
            .map_err(|e| Error::Data(format!("truncated frame at t = {t}: {e}")))?;
        Ok(Some(Frame { t, values }))
    }
}

impl<R: Read> Iterator for FrameReader<R> {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

/// Reads frames from CSV with a header row `t,<channel>,...`.
pub fn read_frames_csv<R: Read>(r: R) -> Result<Vec<Frame>> {
    let mut rdr = csv::Reader::from_reader(r);
    let n = rdr.headers()?.len();
    if n < 2 {
        return Err(Error::Data("frame CSV needs a time column and at least one channel".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("frame CSV row {}: {e}", i + 2)))?;
        out.push(Frame { t: vals[0], values: vals[1..].to_vec() });
    }
    Ok(out)
}
