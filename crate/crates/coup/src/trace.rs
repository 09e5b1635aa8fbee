//! Line-delimited run traces. The first line is a header carrying the
//! format version and the full config; every later line is one event
//! stamped with a logical step ordinal and the budget consumed so far.
//! Replaying a trace against the same scripted backend reproduces the
//! final run state exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunMode};
use crate::rng::Fnv64;
use crate::space::TemplateId;
use crate::{Error, Result};

pub const TRACE_FORMAT: &str = "coup-trace/v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub mode: RunMode,
    pub config_digest: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Ordinal position in the event stream, starting at 0.
    pub step: u64,
    /// Oracle calls consumed when the event was recorded.
    pub budget_used: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    ArmAdded {
        id: TemplateId,
        activation_step: u64,
    },
    Expansion {
        round: u64,
        /// `None` when the proposal loop saturated without adding an arm.
        added: Option<TemplateId>,
        was_uniform: Option<bool>,
        uniform_draws: u64,
    },
    PairSelected {
        round: u64,
        leader: TemplateId,
        challenger: TemplateId,
    },
    Observation {
        id: TemplateId,
        draw_index: u64,
        utility: f64,
    },
    /// Fresh top-K re-evaluation draw; never folded into bounds, so replay
    /// skips it. Kept in the trace for exact budget accounting.
    ReevalObservation {
        id: TemplateId,
        draw_index: u64,
        utility: f64,
    },
    BoundsRefreshed {
        pool_size: u64,
    },
    Certified {
        id: TemplateId,
        lcb: f64,
        threshold: f64,
    },
    ThresholdRaised {
        from: f64,
        to: f64,
    },
    /// Closes one batch; carries the control quantities so a trace doubles
    /// as the epsilon/gamma trajectory.
    BatchExecuted {
        index: u64,
        rounds: u64,
        epsilon: f64,
        gamma: f64,
    },
}

/// Appends records to an optional file while keeping them in memory and
/// folding every written byte into a running digest, so a snapshot can
/// assert the on-disk prefix it expects before resuming.
pub struct TraceWriter {
    file: Option<BufWriter<File>>,
    pub records: Vec<TraceRecord>,
    pub header: TraceHeader,
    next_step: u64,
    bytes_written: u64,
    digest: Fnv64,
}

impl TraceWriter {
    pub fn create(path: Option<&Path>, header: TraceHeader) -> Result<TraceWriter> {
        let mut writer = TraceWriter {
            file: match path {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            },
            records: Vec::new(),
            header,
            next_step: 0,
            bytes_written: 0,
            digest: Fnv64::new(),
        };
        let line = serde_json::to_string(&writer.header)?;
        writer.write_line(&line)?;
        Ok(writer)
    }

    /// Reopens `path` for appending after a resume. The caller has already
    /// verified and truncated the prefix; `bytes` and `digest` continue
    /// from that prefix, `next_step` from the replayed record count.
    pub fn reopen(
        path: Option<&Path>,
        header: TraceHeader,
        records: Vec<TraceRecord>,
        bytes_written: u64,
        digest: Fnv64,
    ) -> Result<TraceWriter> {
        let file = match path {
            Some(p) => Some(BufWriter::new(
                File::options().append(true).open(p)?,
            )),
            None => None,
        };
        let next_step = records.len() as u64;
        Ok(TraceWriter {
            file,
            records,
            header,
            next_step,
            bytes_written,
            digest,
        })
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        let bytes = line.as_bytes();
        self.digest.update(bytes);
        self.digest.update(b"\n");
        self.bytes_written += bytes.len() as u64 + 1;
        if let Some(f) = &mut self.file {
            f.write_all(bytes)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn push(&mut self, budget_used: u64, event: TraceEvent) -> Result<()> {
        let record = TraceRecord {
            step: self.next_step,
            budget_used,
            event,
        };
        self.next_step += 1;
        let line = serde_json::to_string(&record)?;
        self.write_line(&line)?;
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn digest(&self) -> String {
        format!("{:016x}", self.digest.finish())
    }

    pub fn digest_state(&self) -> Fnv64 {
        self.digest
    }

    pub fn into_trace(self) -> Trace {
        Trace {
            header: self.header,
            records: self.records,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

/// Reads only the header line, leaving the records on disk. The cheap way
/// to recover a run's config from its trace.
pub fn read_header(path: &Path) -> Result<TraceHeader> {
    let file = File::open(path)
        .map_err(|e| Error::Snapshot(format!("cannot open trace {}: {e}", path.display())))?;
    let mut header_line = String::new();
    BufReader::new(file).read_line(&mut header_line)?;
    if header_line.is_empty() {
        return Err(Error::Snapshot("trace file is empty".into()));
    }
    let header: TraceHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| Error::Snapshot(format!("bad trace header: {e}")))?;
    if header.format != TRACE_FORMAT {
        return Err(Error::Snapshot(format!(
            "trace format {:?} is not {TRACE_FORMAT:?}",
            header.format
        )));
    }
    Ok(header)
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path)
        .map_err(|e| Error::Snapshot(format!("cannot open trace {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Snapshot("trace file is empty".into()))??;
    let header: TraceHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Snapshot(format!("bad trace header: {e}")))?;
    if header.format != TRACE_FORMAT {
        return Err(Error::Snapshot(format!(
            "trace format {:?} is not {TRACE_FORMAT:?}",
            header.format
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Snapshot(format!("bad trace record: {e}")))?,
        );
    }
    Ok(Trace { header, records })
}

/// Digest of the first `bytes` bytes of the file, for resume verification.
pub fn digest_prefix(path: &Path, bytes: u64) -> Result<(String, Fnv64)> {
    let data = std::fs::read(path)
        .map_err(|e| Error::Snapshot(format!("cannot read trace {}: {e}", path.display())))?;
    if (data.len() as u64) < bytes {
        return Err(Error::Snapshot(format!(
            "trace file holds {} bytes, snapshot expects at least {bytes}",
            data.len()
        )));
    }
    let mut digest = Fnv64::new();
    digest.update(&data[..bytes as usize]);
    Ok((format!("{:016x}", digest.finish()), digest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use tempfile::tempdir;

    fn header() -> TraceHeader {
        let config = RunConfig::default();
        TraceHeader {
            format: TRACE_FORMAT.into(),
            mode: RunMode::Coup,
            config_digest: config.digest(),
            config,
        }
    }

    fn id(x: i64) -> TemplateId {
        TemplateId {
            values: vec![("x".into(), crate::space::ParamValue::Int(x))],
        }
    }

    #[test]
    fn records_round_trip_through_a_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut w = TraceWriter::create(Some(&path), header()).unwrap();
        w.push(
            0,
            TraceEvent::ArmAdded {
                id: id(3),
                activation_step: 0,
            },
        )
        .unwrap();
        w.push(
            1,
            TraceEvent::Observation {
                id: id(3),
                draw_index: 0,
                utility: 1.0,
            },
        )
        .unwrap();
        w.flush().unwrap();
        let disk_digest = digest_prefix(&path, w.bytes_written()).unwrap().0;
        assert_eq!(disk_digest, w.digest());
        let written = w.records.clone();
        let trace = read_trace(&path).unwrap();
        assert_eq!(trace.records, written);
        assert_eq!(trace.header.config_digest, RunConfig::default().digest());
        assert_eq!(trace.records[0].step, 0);
        assert_eq!(trace.records[1].step, 1);
        let head = read_header(&path).unwrap();
        assert_eq!(head.config_digest, trace.header.config_digest);
    }

    #[test]
    fn event_lines_are_tagged_json() {
        let mut w = TraceWriter::create(None, header()).unwrap();
        w.push(
            5,
            TraceEvent::ThresholdRaised { from: 0.8, to: 0.9 },
        )
        .unwrap();
        let line = serde_json::to_string(&w.records[0]).unwrap();
        assert!(line.contains("\"event\":\"threshold_raised\""));
        assert!(line.contains("\"budget_used\":5"));
    }

    #[test]
    fn format_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut h = header();
        h.format = "coup-trace/v0".into();
        let mut w = TraceWriter::create(Some(&path), h).unwrap();
        w.flush().unwrap();
        assert!(matches!(read_trace(&path), Err(Error::Snapshot(_))));
    }

    #[test]
    fn reopen_continues_bytes_and_steps() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut w = TraceWriter::create(Some(&path), header()).unwrap();
        w.push(0, TraceEvent::BoundsRefreshed { pool_size: 50 }).unwrap();
        w.flush().unwrap();
        let (bytes, digest) = (w.bytes_written(), w.digest_state());
        let records = w.records.clone();
        let h = w.header.clone();
        drop(w);
        let mut w2 = TraceWriter::reopen(Some(&path), h, records, bytes, digest).unwrap();
        w2.push(
            20,
            TraceEvent::BatchExecuted {
                index: 0,
                rounds: 10,
                epsilon: 1.0,
                gamma: 1.0,
            },
        )
        .unwrap();
        w2.flush().unwrap();
        let trace = read_trace(&path).unwrap();
        assert_eq!(trace.records.len(), 2);
        assert_eq!(trace.records[1].step, 1);
        assert_eq!(
            digest_prefix(&path, w2.bytes_written()).unwrap().0,
            w2.digest()
        );
    }
}
