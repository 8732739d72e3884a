//! Versioned result reports and their CSV, JSON and plot-data renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use cmpt_core::eval::{AblationGrid, AttentionDump, ClassDelta, SweepResult};
use cmpt_core::metrics::Metrics;
use cmpt_core::model::TrainingMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = "cmpt-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportBody {
    Eval {
        mode: TrainingMode,
        results: Vec<Metrics>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deltas: Option<Vec<ClassDelta>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attention: Option<Vec<Vec<AttentionDump>>>,
    },
    Sweep {
        mode: TrainingMode,
        sweep: SweepResult,
    },
    Ablation {
        grid: AblationGrid,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub seed: u64,
    pub body: ReportBody,
}

impl Report {
    pub fn new(seed: u64, body: ReportBody) -> Self {
        Self {
            schema: SCHEMA.into(),
            seed,
            body,
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let r: Report = serde_json::from_str(text).map_err(|e| CliError::Data(format!("invalid report: {e}")))?;
        if r.schema != SCHEMA {
            return Err(CliError::Data(format!("unsupported report schema '{}'", r.schema)));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    PlotData,
}

impl FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "plotdata" => Ok(Format::PlotData),
            other => Err(CliError::Config(format!("unknown report format '{other}'"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::PlotData => "dat",
        }
    }
}

/// `(name, value)` pairs reported for one metrics record.
pub fn metric_values(m: &Metrics) -> Vec<(String, f64)> {
    let mut v = vec![
        ("accuracy".to_string(), m.accuracy),
        ("f1_macro".to_string(), m.f1_macro),
        ("f1_micro".to_string(), m.f1_micro),
    ];
    v.extend(m.per_class_f1.iter().enumerate().map(|(k, &f)| (format!("f1_class_{k}"), f)));
    v
}

/// Every `(scenario, metrics)` pair of a report in output order.
pub fn scenarios(r: &Report) -> Vec<(String, &Metrics)> {
    match &r.body {
        ReportBody::Eval { results, .. } => results
            .iter()
            .enumerate()
            .map(|(i, m)| (m.protocol.clone().unwrap_or_else(|| format!("result{i}")), m))
            .collect(),
        ReportBody::Sweep { sweep, .. } => sweep
            .rows
            .iter()
            .map(|row| (format!("{}={}", sweep.varying.name(), row.x_pct), &row.metrics))
            .collect(),
        ReportBody::Ablation { grid } => grid
            .cells
            .iter()
            .flat_map(|cell| {
                cell.scenarios.iter().map(move |s| {
                    (format!("{}={}/{}", grid.axis.name(), cell.value, s.scenario.name()), &s.metrics)
                })
            })
            .collect(),
    }
}

pub fn to_csv(r: &Report) -> String {
    let mut out = String::from("scenario,metric,value\n");
    for (scenario, m) in scenarios(r) {
        for (metric, value) in metric_values(m) {
            let _ = writeln!(out, "{scenario},{metric},{value}");
        }
    }
    out
}

pub fn to_json(r: &Report) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

pub fn to_plotdata(r: &Report) -> String {
    let mut out = String::new();
    let row = |out: &mut String, lead: String, m: &Metrics| {
        let _ = writeln!(out, "{lead} {} {} {}", m.accuracy, m.f1_macro, m.f1_micro);
    };
    match &r.body {
        ReportBody::Sweep { sweep, .. } => {
            let _ = writeln!(out, "# x accuracy f1_macro f1_micro");
            for s in &sweep.rows {
                row(&mut out, format!("{}", s.x_pct), &s.metrics);
            }
        }
        ReportBody::Ablation { grid } => {
            for (si, scenario) in cmpt_core::eval::Scenario::ALL.iter().enumerate() {
                if si > 0 {
                    out.push_str("\n\n");
                }
                let _ = writeln!(out, "# series {}", scenario.name());
                let _ = writeln!(out, "# index {} accuracy f1_macro f1_micro", grid.axis.name());
                for (i, cell) in grid.cells.iter().enumerate() {
                    if let Some(s) = cell.scenarios.iter().find(|s| s.scenario == *scenario) {
                        row(&mut out, format!("{i} {}", cell.value), &s.metrics);
                    }
                }
            }
        }
        ReportBody::Eval { .. } => {
            let _ = writeln!(out, "# index protocol accuracy f1_macro f1_micro");
            for (i, (name, m)) in scenarios(r).into_iter().enumerate() {
                row(&mut out, format!("{i} {name}"), m);
            }
        }
    }
    out
}

pub fn render(r: &Report, format: Format) -> String {
    match format {
        Format::Csv => to_csv(r),
        Format::Json => to_json(r),
        Format::PlotData => to_plotdata(r),
    }
}

pub fn write_report(r: &Report, format: Format, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, render(r, format)).map_err(|e| CliError::io(path, e))
}
