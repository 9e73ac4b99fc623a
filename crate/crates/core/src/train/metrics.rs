use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{BatchLossReport, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub losses: BatchLossReport,
    /// Selected frames over weak/unlabeled frames of the mixed batch.
    pub anchor_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Completed epochs (0 for the initial model).
    pub epoch: usize,
    pub phase: Phase,
    pub step: u64,
    pub frame_f1: f64,
    pub event_f1: f64,
    pub mean_total_loss: f64,
    pub mean_anchor_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Epoch(EpochRecord),
    Transition { step: u64, epoch: usize, prototypes: Vec<String> },
}

/// In-memory metrics log, optionally mirrored to a JSONL file.
#[derive(Default)]
pub struct MetricsLog {
    pub records: Vec<Record>,
    file: Option<BufWriter<fs::File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { records: Vec::new(), file: Some(BufWriter::new(f)) })
    }

    pub fn push(&mut self, rec: Record) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            if !matches!(rec, Record::Step(_)) {
                f.flush()?;
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Epoch(e) => Some(e),
            _ => None,
        })
    }

    /// All records as JSONL text.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}
