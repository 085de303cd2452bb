//! Report documents, result tables and penalty curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bench::{BenchTask, Condition, PipelineConfig, Reference};
use super::{eci, EciParams, EntryScore, ItemTally};
use crate::error::Result;

/// Penalty exponents plotted against the per-item ratio.
pub const CURVE_ALPHAS: [f64; 5] = [0.4, 0.65, 1.0, 1.5, 2.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub task: BenchTask,
    pub method: Condition,
    pub backend_id: String,
    /// Reference the ECI tallies were scored against.
    pub reference: Reference,
    pub mean_eci: f64,
    pub mean_accuracy: Option<f64>,
    pub n_entries: usize,
    pub params: EciParams,
    pub seed: u64,
    pub per_entry: Vec<EntryScore>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn new(
        dataset_name: &str,
        cfg: &PipelineConfig<'_>,
        backend_id: &str,
        params: EciParams,
        seed: u64,
        mut per_entry: Vec<EntryScore>,
    ) -> Self {
        per_entry.sort_by(|a, b| a.id.cmp(&b.id));
        EvalReport {
            dataset_name: dataset_name.to_string(),
            task: cfg.task,
            method: cfg.condition,
            backend_id: backend_id.to_string(),
            reference: cfg.reference,
            mean_eci: mean(per_entry.iter().map(|e| e.eci)).unwrap_or(0.0),
            mean_accuracy: mean(per_entry.iter().filter_map(|e| e.accuracy)),
            n_entries: per_entry.len(),
            params,
            seed,
            per_entry,
        }
    }

    /// Table column: backend and condition.
    pub fn column(&self) -> String {
        format!("{} [{}]", self.backend_id, self.method.label())
    }

    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Eci => Some(self.mean_eci),
            Metric::Accuracy => self.mean_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Eci,
    Accuracy,
}

struct Grid {
    rows: Vec<String>,
    cols: Vec<String>,
    cells: BTreeMap<(String, String), f64>,
}

fn grid(reports: &[EvalReport], metric: Metric) -> Grid {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut cells = BTreeMap::new();
    let (mut seen_r, mut seen_c) = (BTreeSet::new(), BTreeSet::new());
    for r in reports {
        let (row, col) = (r.dataset_name.clone(), r.column());
        if seen_r.insert(row.clone()) {
            rows.push(row.clone());
        }
        if seen_c.insert(col.clone()) {
            cols.push(col.clone());
        }
        if let Some(v) = r.value(metric) {
            cells.insert((row, col), v);
        }
    }
    Grid { rows, cols, cells }
}

/// Aligned plain-text table: one row per dataset, one column per backend
/// and condition. Missing cells print as `-`.
pub fn render_table(reports: &[EvalReport], metric: Metric) -> String {
    let g = grid(reports, metric);
    let header = match metric {
        Metric::Eci => "dataset (mean ECI)",
        Metric::Accuracy => "dataset (mean accuracy)",
    };
    let mut lines: Vec<Vec<String>> = vec![std::iter::once(header.to_string()).chain(g.cols.iter().cloned()).collect()];
    for row in &g.rows {
        let mut line = vec![row.clone()];
        for col in &g.cols {
            line.push(g.cells.get(&(row.clone(), col.clone())).map_or("-".into(), |v| format!("{v:.4}")));
        }
        lines.push(line);
    }
    let widths: Vec<usize> =
        (0..lines[0].len()).map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (n, line) in lines.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if n == 0 {
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Same layout as [`render_table`] as CSV; missing cells are empty.
pub fn render_csv(reports: &[EvalReport], metric: Metric) -> String {
    let g = grid(reports, metric);
    let mut out = String::from("dataset");
    for c in &g.cols {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for row in &g.rows {
        out.push_str(&csv_field(row));
        for col in &g.cols {
            out.push(',');
            if let Some(v) = g.cells.get(&(row.clone(), col.clone())) {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub ratio: f64,
    pub alpha: f64,
    pub value: f64,
}

/// Single-item ECI over the ratio grid `0, 1/steps, ..., 1` for each alpha.
pub fn penalty_curves(alphas: &[f64], steps: u32) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(alphas.len() * (steps as usize + 1));
    for &alpha in alphas {
        let params = EciParams::new(alpha, steps)?;
        for i in 0..=steps {
            let value = eci(&[ItemTally::new(i, steps)?], &params)?;
            out.push(CurvePoint { ratio: f64::from(i) / f64::from(steps), alpha, value });
        }
    }
    Ok(out)
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("ratio,alpha,value\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.ratio, p.alpha, p.value);
    }
    out
}
