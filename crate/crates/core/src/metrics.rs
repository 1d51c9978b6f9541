//! Metrics records and sinks. One JSON object per line, no timestamps.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    Schema(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl LambdaStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricsRecord {
    Evaluation {
        step: u64,
        episodes: usize,
        mean_return: f64,
        std_return: f64,
        returns: Vec<f64>,
        /// Mean optimal return over the same initial states, when known.
        optimal_mean_return: Option<f64>,
    },
    Diagnostics {
        step: u64,
        updates: u64,
        critic_loss: f64,
        policy_objective: Option<f64>,
        mean_abs_td: f64,
        lambda: Option<LambdaStats>,
        /// Every weight produced since the previous diagnostics record.
        lambda_window: Option<LambdaStats>,
        buffer_size: usize,
    },
    WeightAnalysis {
        step: u64,
        lambda: f64,
        normalized_step: f64,
        normalized_lambda: f64,
    },
    Contraction {
        step: u64,
        mdp: usize,
        trial: usize,
        ratio: Option<f64>,
        max_xi: f64,
        negative_cells: usize,
        violations: usize,
    },
}

impl MetricsRecord {
    pub fn step(&self) -> u64 {
        match self {
            MetricsRecord::Evaluation { step, .. }
            | MetricsRecord::Diagnostics { step, .. }
            | MetricsRecord::WeightAnalysis { step, .. }
            | MetricsRecord::Contraction { step, .. } => *step,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MetricsRecord::Evaluation { .. } => "evaluation",
            MetricsRecord::Diagnostics { .. } => "diagnostics",
            MetricsRecord::WeightAnalysis { .. } => "weight-analysis",
            MetricsRecord::Contraction { .. } => "contraction",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    schema: u32,
    #[serde(flatten)]
    record: MetricsRecord,
}

pub fn to_json_line(record: &MetricsRecord) -> String {
    serde_json::to_string(&Line { schema: SCHEMA_VERSION, record: record.clone() }).expect("records serialize")
}

/// Parses and validates one JSONL line.
pub fn parse_line(line: &str) -> Result<MetricsRecord, MetricsError> {
    let parsed: Line = serde_json::from_str(line)?;
    if parsed.schema != SCHEMA_VERSION {
        return Err(MetricsError::Schema(parsed.schema));
    }
    Ok(parsed.record)
}

pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<(), MetricsError>;
}

#[derive(Debug, Default, Clone)]
pub struct VecSink {
    pub records: Vec<MetricsRecord>,
}

impl MetricsSink for VecSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<(), MetricsError> {
        self.records.push(record.clone());
        Ok(())
    }
}

pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, record: &MetricsRecord) -> Result<(), MetricsError> {
        writeln!(self.out, "{}", to_json_line(record))?;
        Ok(())
    }
}

/// Forwards every record to two sinks.
pub struct Tee<'a> {
    pub first: &'a mut dyn MetricsSink,
    pub second: &'a mut dyn MetricsSink,
}

impl MetricsSink for Tee<'_> {
    fn record(&mut self, record: &MetricsRecord) -> Result<(), MetricsError> {
        self.first.record(record)?;
        self.second.record(record)
    }
}
