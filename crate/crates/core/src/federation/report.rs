//! CSV round logs and the JSON run summary.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ExperimentReport;
use crate::dataset::domain_letter;
use crate::error::Result;
use crate::metrics::MeanStd;

/// One CSV line: a client's losses in one round, with the held-out scores
/// of the aggregated model on evaluation rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub mode: String,
    pub held_out: String,
    pub client_id: u32,
    pub l_seg_inner: f64,
    pub l_seg_meta: f64,
    pub l_boundary: f64,
    pub val_dice: Option<f64>,
    pub val_hd: Option<f64>,
}

pub fn round_rows(report: &ExperimentReport) -> Vec<RoundRow> {
    let mode = report.label();
    let held_out = domain_letter(report.config.held_out);
    report
        .rounds
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(|c| RoundRow {
                round: r.round,
                mode: mode.clone(),
                held_out: held_out.clone(),
                client_id: c.client_id,
                l_seg_inner: c.l_seg_inner,
                l_seg_meta: c.l_seg_meta,
                l_boundary: c.l_boundary,
                val_dice: r.validation.map(|v| v.dice),
                val_hd: r.validation.map(|v| v.hd),
            })
        })
        .collect()
}

pub fn write_rounds_csv(reports: &[ExperimentReport], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for report in reports {
        for row in round_rows(report) {
            w.serialize(row)?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub lambda: String,
    pub held_out: String,
    pub sources: Vec<String>,
    pub seed: u64,
    pub dice: f64,
    pub hd: f64,
    pub per_class_dice: Vec<f64>,
    pub per_class_hd: Vec<f64>,
    pub checksum: u64,
}

/// Mean ± sample std over runs sharing method, λ mode, source count and
/// (for per-domain rows) held-out domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub lambda: String,
    pub num_sources: usize,
    /// Held-out domain letter, or `all`.
    pub held_out: String,
    pub dice: MeanStd,
    pub hd: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
    pub per_domain: Vec<AggregateRow>,
    pub overall: Vec<AggregateRow>,
}

impl Summary {
    /// First overall row for a method label.
    pub fn overall_for(&self, method: &str) -> Option<&AggregateRow> {
        self.overall.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn summarize(reports: &[ExperimentReport]) -> Summary {
    let runs: Vec<RunSummary> = reports
        .iter()
        .map(|r| RunSummary {
            method: r.label(),
            lambda: r.config.lambda.to_string(),
            held_out: domain_letter(r.config.held_out),
            sources: r.sources.iter().map(|&s| domain_letter(s)).collect(),
            seed: r.config.seed,
            dice: r.final_eval.dice.mean,
            hd: r.final_eval.hd.mean,
            per_class_dice: r.final_eval.per_class_dice.iter().map(|m| m.mean).collect(),
            per_class_hd: r.final_eval.per_class_hd.iter().map(|m| m.mean).collect(),
            checksum: r.model.params.checksum(),
        })
        .collect();
    let aggregate = |per_domain: bool| {
        let mut groups: BTreeMap<(String, String, usize, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for run in &runs {
            let held = if per_domain { run.held_out.clone() } else { "all".into() };
            let g = groups
                .entry((run.method.clone(), run.lambda.clone(), run.sources.len(), held))
                .or_default();
            g.0.push(run.dice);
            g.1.push(run.hd);
        }
        groups
            .into_iter()
            .map(|((method, lambda, num_sources, held_out), (dice, hd))| AggregateRow {
                method,
                lambda,
                num_sources,
                held_out,
                dice: MeanStd::of(&dice),
                hd: MeanStd::of(&hd),
            })
            .collect::<Vec<_>>()
    };
    Summary {
        per_domain: aggregate(true),
        overall: aggregate(false),
        runs,
    }
}
