//! Result tables: mean ± std IoU per (model variant, scene), in percent.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::EvalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub scene: String,
    pub runs: usize,
    /// Mean IoU in [0,1].
    pub mean: f64,
    /// Std in [0,1]: the per-sample std for a single run, the std of run
    /// means across runs (cycles) otherwise.
    pub std: f64,
}

/// `0.9596 ± 0.0084` renders as `95.96±0.84`.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, std * 100.0)
}

/// Group evaluation reports by (variant, scene). A single report keeps its
/// own per-sample spread; multiple reports (training cycles) aggregate the
/// mean of means and the sample std of means.
pub fn aggregate(reports: &[EvalReport]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.variant.clone(), r.scene_id.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((variant, scene), rs)| {
            let runs = rs.len();
            if runs == 1 {
                ReportRow { variant, scene, runs, mean: rs[0].mean_iou, std: rs[0].std_iou }
            } else {
                let means: Vec<f64> = rs.iter().map(|r| r.mean_iou).collect();
                let mean = means.iter().sum::<f64>() / runs as f64;
                let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>()
                    / (runs - 1) as f64;
                ReportRow { variant, scene, runs, mean, std: var.sqrt() }
            }
        })
        .collect()
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("variant,scene,runs,iou_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant,
            r.scene,
            r.runs,
            format_cell(r.mean, r.std)
        ));
    }
    out
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from("| variant | scene | runs | IoU (%) |\n|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.variant,
            r.scene,
            r.runs,
            format_cell(r.mean, r.std)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::InvalidInput(format!("unknown report format {other:?}"))),
        }
    }
}

/// Render the aggregated table and write it to `path`.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat, path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no evaluation records to report".into()));
    }
    let rows = aggregate(reports);
    let text = match format {
        ReportFormat::Csv => render_csv(&rows),
        ReportFormat::Markdown => render_markdown(&rows),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
