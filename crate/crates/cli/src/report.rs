use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};

use moscard_core::datamodel::Horizon;
use moscard_core::evalkit::EvalReport;

use crate::commands::{read_json_file, write_file, ProbeReport, SaliencyReport};
use crate::config::Workdir;
use crate::error::{PipelineError, Result};

/// One row of the consolidated table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub split: String,
    pub horizon: Horizon,
    pub head: String,
    pub n: usize,
    pub accuracy: f64,
    pub accuracy_lo: f64,
    pub accuracy_hi: f64,
    pub auc: Option<f64>,
    pub auc_lo: Option<f64>,
    pub auc_hi: Option<f64>,
    pub in_sample: bool,
}

const SUMMARY_HEADER: &str =
    "variant,split,horizon,head,n,accuracy,accuracy_lo,accuracy_hi,auc,auc_lo,auc_hi,in_sample";

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| x.to_string())
}

/// Reads the eval reports in `reports/` (file-name order).
pub fn read_eval_reports(wd: &Workdir) -> Result<Vec<EvalReport>> {
    let dir = wd.reports();
    let mut names: Vec<String> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("eval-") && n.ends_with(".json"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(PipelineError::io(&dir, e)),
    };
    names.sort();
    names.iter().map(|n| read_json_file(&dir.join(n))).collect()
}

/// Consolidates every eval report into `reports/summary.csv` (one row per
/// variant, split, horizon and head) and `reports/spoke.csv` (1yr AUC per
/// subgroup level). Refuses reports from different configs unless `force`.
pub fn cmd_report(wd: &Workdir, force: bool) -> Result<Vec<SummaryRow>> {
    let reports = read_eval_reports(wd)?;
    if reports.is_empty() {
        return Err(PipelineError::MissingInput(format!("no eval reports in {}", wd.reports().display())));
    }
    let mut hashes: Vec<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
    let probe_path = wd.reports().join("probe.json");
    let probe: Option<ProbeReport> = if probe_path.exists() { Some(read_json_file(&probe_path)?) } else { None };
    let sal_path = wd.reports().join("saliency.json");
    let saliency: Option<SaliencyReport> = if sal_path.exists() { Some(read_json_file(&sal_path)?) } else { None };
    hashes.extend(probe.iter().map(|p| p.config_hash.as_str()));
    hashes.extend(saliency.iter().map(|s| s.config_hash.as_str()));
    hashes.sort_unstable();
    hashes.dedup();
    if hashes.len() > 1 && !force {
        return Err(PipelineError::HashMismatch(format!(
            "reports come from {} configs: {}",
            hashes.len(),
            hashes.join(", ")
        )));
    }

    let mut rows: Vec<SummaryRow> = reports
        .iter()
        .flat_map(|r| {
            r.metrics.iter().map(move |m| SummaryRow {
                variant: r.variant.clone(),
                split: r.split.clone(),
                horizon: m.horizon,
                head: m.head.clone(),
                n: m.n,
                accuracy: m.accuracy.point,
                accuracy_lo: m.accuracy.lo,
                accuracy_hi: m.accuracy.hi,
                auc: m.auc.map(|a| a.point),
                auc_lo: m.auc.map(|a| a.lo),
                auc_hi: m.auc.map(|a| a.hi),
                in_sample: r.in_sample,
            })
        })
        .collect();
    rows.sort_by(|a, b| (&a.variant, &a.split, a.horizon, &a.head).cmp(&(&b.variant, &b.split, b.horizon, &b.head)));

    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.split,
            r.horizon.label(),
            r.head,
            r.n,
            r.accuracy,
            r.accuracy_lo,
            r.accuracy_hi,
            opt(r.auc),
            opt(r.auc_lo),
            opt(r.auc_hi),
            r.in_sample
        );
    }
    write_file(&wd.reports().join("summary.csv"), csv)?;

    let mut spoke = String::from("variant,split,head,axis,auc\n");
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.variant, &a.split).cmp(&(&b.variant, &b.split)));
    for r in sorted {
        let mut heads: Vec<&str> = r.metrics.iter().map(|m| m.head.as_str()).collect();
        heads.dedup();
        for head in heads {
            let _ = writeln!(spoke, "{},{},{},overall,{}", r.variant, r.split, head, opt(r.auc(head, Horizon::Y1)));
            for s in r.subgroups.iter().filter(|s| s.head == head && s.horizon == Horizon::Y1) {
                let _ = writeln!(
                    spoke,
                    "{},{},{},{}={},{}",
                    r.variant,
                    r.split,
                    head,
                    s.variable,
                    s.metric.level,
                    opt(s.metric.auc)
                );
            }
        }
    }
    write_file(&wd.reports().join("spoke.csv"), spoke)?;
    Ok(rows)
}
