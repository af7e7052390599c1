//! Serializable evaluation reports.
//!
//! A [`MetricReport`] collects whatever protocol ran into a flat row table
//! (one row per task and prompt draw) plus per-task summaries, stamped with
//! enough metadata to reproduce the numbers: checkpoint and corpus digests,
//! the evaluation seed, and the metric constants in force. Reports
//! serialize to JSON; the per-task summary also exports as a flat CSV
//! table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protocol::mean_std;
use super::{MAE_SCALE, PSNR_CAP_DB};
use crate::{Error, Result};

/// Provenance and constants behind a report's numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Which protocol produced the rows.
    pub protocol: String,
    /// Digest of the checkpoint file the model was loaded from, or a
    /// literal tag such as "copy-baseline" when no checkpoint was involved.
    pub checkpoint: String,
    /// Digest of the evaluation corpus manifest.
    pub corpus: String,
    /// Seed the protocol was run with.
    pub seed: u64,
    pub psnr_cap_db: f64,
    pub mae_scale: f64,
}

impl ReportMeta {
    pub fn new(
        protocol: impl Into<String>,
        checkpoint: impl Into<String>,
        corpus: impl Into<String>,
        seed: u64,
    ) -> ReportMeta {
        ReportMeta {
            protocol: protocol.into(),
            checkpoint: checkpoint.into(),
            corpus: corpus.into(),
            seed,
            psnr_cap_db: PSNR_CAP_DB,
            mae_scale: MAE_SCALE,
        }
    }
}

/// One measured number: a task scored under one prompt draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub prompt_draw: usize,
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
}

/// Per-task aggregate over that task's prompt draws. The spread is only
/// reported when it is computed over at least two draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub metric: String,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub n_prompt_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<TaskSummary>,
    /// Protocol-level scalars (steering accuracy, chance floor, ...) keyed
    /// by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scalars: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(meta: ReportMeta) -> MetricReport {
        MetricReport {
            meta,
            rows: Vec::new(),
            summary: Vec::new(),
            scalars: BTreeMap::new(),
        }
    }

    pub fn push_row(
        &mut self,
        task: impl Into<String>,
        prompt_draw: usize,
        metric: impl Into<String>,
        value: f64,
        n_samples: usize,
    ) {
        self.rows.push(ReportRow {
            task: task.into(),
            prompt_draw,
            metric: metric.into(),
            value,
            n_samples,
        });
    }

    pub fn set_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.scalars.insert(name.into(), value);
    }

    /// Rebuilds the per-task summary from the rows, grouping by (task,
    /// metric) in first-seen order. A task with a single prompt draw gets no
    /// spread; one with two or more gets the population deviation.
    pub fn summarize(&mut self) {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            let key = (row.task.clone(), row.metric.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(row.value);
        }
        self.summary = order
            .into_iter()
            .map(|key| {
                let values = &groups[&key];
                let (mean, std) = mean_std(values);
                TaskSummary {
                    task: key.0,
                    metric: key.1,
                    mean,
                    std: (values.len() >= 2).then_some(std),
                    n_prompt_draws: values.len(),
                }
            })
            .collect();
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("serializing report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<MetricReport> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("parsing report: {e}")))
    }

    /// The per-task summary as a flat CSV table. Scalars append as extra
    /// rows with an empty metric column so the file stays one table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,mean,std,n_prompt_draws\n");
        for s in &self.summary {
            let std = s.std.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.task, s.metric, s.mean, std, s.n_prompt_draws
            ));
        }
        for (name, value) in &self.scalars {
            out.push_str(&format!("{name},,{value},,\n"));
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)
            .map_err(Error::io(format!("writing report {}", path.display())))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())
            .map_err(Error::io(format!("writing report table {}", path.display())))
    }
}
