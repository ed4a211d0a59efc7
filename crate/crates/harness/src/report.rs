//! Deterministic CSV/JSON report emission and the recompute-from-records
//! consistency check.
//!
//! Numbers are rendered with six significant digits; rows are ordered
//! lexicographically by key, so identical runs produce byte-identical
//! files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use illusion_core::attack::AttackCostRecord;
use illusion_core::consensus::MetricSummary;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::experiments::{CostOutput, GridOutput, GridRecordRow, SweepOutput, TransferOutput};
use crate::workbench::CalibrationReport;

pub const GRID_HEADER: &str = "method,input_kind,label_kind,top1,top5,cs_mean,cs_std,n,seed,config_hash";
pub const GRID_RECORDS_HEADER: &str = "method,input_kind,sample_id,true_label,target_label,top1_original,top5_original,cs_original,top1_target,top5_target,cs_target";
pub const SWEEP_HEADER: &str = "sanitizer,num_draws,input_kind,top1,top5,cs_mean,cs_std,target_top1,n";
pub const COST_HEADER: &str = "sample_id,target_label,loops_used,final_cos,success,defended_flag";
pub const TRANSFER_HEADER: &str = "direction,arm,label_kind,top1,top5,cs_mean,cs_std,n";
pub const CALIBRATION_HEADER: &str =
    "sigma,clean_top1,adaptive_success,eta_adaptive,eta_adaptive_se,eta_pixel,eta_pixel_se,selected";

/// Render with six significant digits, shortest round-trip form.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else { format!("{x}") };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - magnitude);
    let rounded = (x * scale).round() / scale;
    format!("{rounded}")
}

/// Provenance attached to every emitted table.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
    pub encoder_kind: String,
    pub vae_sigma: f64,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig, encoder_kind: &str, vae_sigma: f64) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.short_hash()?,
            master_seed: cfg.master_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            encoder_kind: encoder_kind.to_string(),
            vae_sigma,
        })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn grid_csv(grid: &GridOutput, prov: &Provenance) -> Result<String> {
    if grid.cells.is_empty() {
        bail!("refusing to emit an empty grid");
    }
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for ((method, input, label), s) in &grid.cells {
        out.push_str(&format!(
            "{method},{input},{label},{},{},{},{},{},{},{}\n",
            fmt_sig(s.top1),
            fmt_sig(s.top5),
            fmt_sig(s.cs_mean),
            fmt_sig(s.cs_std),
            s.n,
            prov.master_seed,
            prov.config_hash,
        ));
    }
    Ok(out)
}

pub fn grid_records_csv(grid: &GridOutput) -> Result<String> {
    if grid.records.is_empty() {
        bail!("refusing to emit empty grid records");
    }
    let mut out = String::from(GRID_RECORDS_HEADER);
    out.push('\n');
    for r in &grid.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.input_kind,
            r.sample_id,
            r.true_label,
            r.target_label,
            r.top1_original as u8,
            r.top5_original as u8,
            fmt_sig(r.cs_original),
            r.top1_target as u8,
            r.top5_target as u8,
            fmt_sig(r.cs_target),
        ));
    }
    Ok(out)
}

pub fn sweep_csv(sweep: &SweepOutput) -> Result<String> {
    if sweep.rows.is_empty() {
        bail!("refusing to emit an empty sweep");
    }
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in &sweep.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.sanitizer,
            r.num_draws,
            r.input_kind,
            fmt_sig(r.summary.top1),
            fmt_sig(r.summary.top5),
            fmt_sig(r.summary.cs_mean),
            fmt_sig(r.summary.cs_std),
            fmt_sig(r.target_top1),
            r.summary.n,
        ));
    }
    Ok(out)
}

pub fn cost_csv(cost: &CostOutput) -> Result<String> {
    if cost.records.is_empty() {
        bail!("refusing to emit empty attack-cost records");
    }
    let mut out = String::from(COST_HEADER);
    out.push('\n');
    for r in &cost.records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample_id,
            r.target_label,
            r.loops_used,
            fmt_sig(r.final_cos),
            r.success as u8,
            r.defended as u8,
        ));
    }
    Ok(out)
}

pub fn transfer_csv(transfer: &TransferOutput) -> Result<String> {
    if transfer.rows.is_empty() {
        bail!("refusing to emit an empty transfer table");
    }
    let mut out = String::from(TRANSFER_HEADER);
    out.push('\n');
    for r in &transfer.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.direction,
            r.arm,
            r.label_kind,
            fmt_sig(r.summary.top1),
            fmt_sig(r.summary.top5),
            fmt_sig(r.summary.cs_mean),
            fmt_sig(r.summary.cs_std),
            r.summary.n,
        ));
    }
    Ok(out)
}

pub const VOTES_HEADER: &str = "method,input_kind,sample_id,draw_index,vote,top_score";

/// Per-draw vote audit records.
pub fn votes_csv(grid: &GridOutput) -> String {
    let mut out = String::from(VOTES_HEADER);
    out.push('\n');
    for v in &grid.votes {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            v.method,
            v.input_kind,
            v.sample_id,
            v.draw_index,
            v.vote,
            fmt_sig(v.top_score),
        ));
    }
    out
}

pub fn calibration_csv(report: &CalibrationReport) -> String {
    let mut out = String::from(CALIBRATION_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_sig(r.sigma),
            fmt_sig(r.clean_top1),
            fmt_sig(r.adaptive_success),
            fmt_sig(r.eta_adaptive),
            fmt_sig(r.eta_adaptive_se),
            fmt_sig(r.eta_pixel),
            fmt_sig(r.eta_pixel_se),
            r.selected as u8,
        ));
    }
    out
}

/// Histogram with fixed bin edges: `[lo + i w, lo + (i+1) w)`, the last
/// bin closed on the right.
fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    let w = (hi - lo) / bins as f64;
    for v in values {
        let mut idx = ((v - lo) / w).floor() as isize;
        if idx < 0 {
            idx = 0;
        }
        if idx as usize >= bins {
            idx = bins as isize - 1;
        }
        counts[idx as usize] += 1;
    }
    counts
}

fn hist_csv_one(values: Vec<f64>, lo: f64, hi: f64, bins: usize, value_name: &str) -> String {
    let counts = histogram(values.into_iter(), lo, hi, bins);
    let w = (hi - lo) / bins as f64;
    let mut out = format!("bin_lo,bin_hi,{value_name}\n");
    for (i, c) in counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_sig(lo + i as f64 * w),
            fmt_sig(lo + (i + 1) as f64 * w),
            c
        ));
    }
    out
}

/// Cosine histogram of successful undefended attacks (threshold-selection
/// figure analog): 20 bins over [0, 1].
pub fn fig3_csv(cost: &CostOutput) -> String {
    let values: Vec<f64> = cost
        .records
        .iter()
        .filter(|r| !r.defended && r.success)
        .map(|r| r.final_cos)
        .collect();
    hist_csv_one(values, 0.0, 1.0, 20, "count")
}

/// Loop-count histograms for both arms: 20 bins over [0, loop_budget].
pub fn fig4_csv(cost: &CostOutput, loop_budget: usize) -> String {
    let bins = 20usize;
    let hi = loop_budget as f64;
    let und = histogram(
        cost.records.iter().filter(|r| !r.defended).map(|r| r.loops_used as f64),
        0.0,
        hi,
        bins,
    );
    let def = histogram(
        cost.records.iter().filter(|r| r.defended).map(|r| r.loops_used as f64),
        0.0,
        hi,
        bins,
    );
    let w = hi / bins as f64;
    let mut out = String::from("bin_lo,bin_hi,undefended,defended\n");
    for i in 0..bins {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_sig(i as f64 * w),
            fmt_sig((i + 1) as f64 * w),
            und[i],
            def[i]
        ));
    }
    out
}

/// Cosine histogram of the defended arm: 20 bins over [0, 1].
pub fn fig5_csv(cost: &CostOutput) -> String {
    let values: Vec<f64> = cost
        .records
        .iter()
        .filter(|r| r.defended)
        .map(|r| r.final_cos)
        .collect();
    hist_csv_one(values, 0.0, 1.0, 20, "count")
}

fn summary_value(s: &MetricSummary) -> serde_json::Value {
    json!({
        "top1": s.top1,
        "top5": s.top5,
        "cs_mean": s.cs_mean,
        "cs_std": s.cs_std,
        "n": s.n,
    })
}

/// JSON mirror of every emitted table.
pub fn summary_json(
    prov: &Provenance,
    grid: Option<&GridOutput>,
    sweep: Option<&SweepOutput>,
    cost: Option<&CostOutput>,
    transfer: Option<&TransferOutput>,
    calibration: Option<&CalibrationReport>,
) -> Result<String> {
    let mut root = BTreeMap::new();
    root.insert(
        "provenance".to_string(),
        json!({
            "config_hash": prov.config_hash,
            "master_seed": prov.master_seed,
            "version": prov.version,
            "encoder_kind": prov.encoder_kind,
            "vae_sigma": prov.vae_sigma,
        }),
    );
    if let Some(g) = grid {
        let mut cells = BTreeMap::new();
        for ((m, i, l), s) in &g.cells {
            cells.insert(format!("{m}|{i}|{l}"), summary_value(s));
        }
        root.insert("grid".into(), json!(cells));
    }
    if let Some(s) = sweep {
        let rows: Vec<serde_json::Value> = s
            .rows
            .iter()
            .map(|r| {
                json!({
                    "sanitizer": r.sanitizer,
                    "num_draws": r.num_draws,
                    "input_kind": r.input_kind,
                    "top1": r.summary.top1,
                    "top5": r.summary.top5,
                    "cs_mean": r.summary.cs_mean,
                    "cs_std": r.summary.cs_std,
                    "target_top1": r.target_top1,
                    "n": r.summary.n,
                })
            })
            .collect();
        root.insert("sweep".into(), json!(rows));
    }
    if let Some(c) = cost {
        let arm = |defended: bool| {
            let records: Vec<&AttackCostRecord> = c.arm(defended);
            let succ = records.iter().filter(|r| r.success).count();
            json!({
                "samples": records.len(),
                "successes": succ,
                "median_loops": median(records.iter().map(|r| r.loops_used as f64)),
                "median_final_cos": median(records.iter().map(|r| r.final_cos)),
            })
        };
        root.insert(
            "attack_cost".into(),
            json!({ "undefended": arm(false), "defended": arm(true) }),
        );
    }
    if let Some(t) = transfer {
        let rows: Vec<serde_json::Value> = t
            .rows
            .iter()
            .map(|r| {
                json!({
                    "direction": r.direction,
                    "arm": r.arm,
                    "label_kind": r.label_kind,
                    "top1": r.summary.top1,
                    "top5": r.summary.top5,
                    "cs_mean": r.summary.cs_mean,
                    "cs_std": r.summary.cs_std,
                    "n": r.summary.n,
                })
            })
            .collect();
        root.insert("transfer".into(), json!(rows));
    }
    if let Some(cal) = calibration {
        let rows: Vec<serde_json::Value> = cal
            .rows
            .iter()
            .map(|r| {
                json!({
                    "sigma": r.sigma,
                    "clean_top1": r.clean_top1,
                    "adaptive_success": r.adaptive_success,
                    "eta_adaptive": r.eta_adaptive,
                    "eta_adaptive_se": r.eta_adaptive_se,
                    "eta_pixel": r.eta_pixel,
                    "eta_pixel_se": r.eta_pixel_se,
                    "selected": r.selected,
                })
            })
            .collect();
        root.insert(
            "calibration".into(),
            json!({
                "reference_clean_top1": cal.reference_clean_top1,
                "selected_sigma": cal.selected_sigma,
                "rows": rows,
            }),
        );
    }
    serde_json::to_string_pretty(&root).context("serializing summary json")
}

pub fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Write a set of rendered files under `out_dir`.
pub fn emit(out_dir: &Path, files: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = out_dir.join(name);
        write_file(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}

/// Re-aggregate grid summaries from the flat per-sample records; used by
/// the `report` subcommand and the consistency tests.
pub fn recompute_grid_from_records(
    records: &[GridRecordRow],
) -> BTreeMap<(String, String, String), MetricSummary> {
    let mut groups: BTreeMap<(String, String), Vec<&GridRecordRow>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.input_kind.clone()))
            .or_default()
            .push(r);
    }
    let mut cells = BTreeMap::new();
    for ((method, input), mut rows) in groups {
        rows.sort_by_key(|r| r.sample_id);
        let n = rows.len();
        for (label, top1s, top5s, css) in [
            (
                "original",
                rows.iter().map(|r| r.top1_original).collect::<Vec<_>>(),
                rows.iter().map(|r| r.top5_original).collect::<Vec<_>>(),
                rows.iter().map(|r| r.cs_original).collect::<Vec<_>>(),
            ),
            (
                "target",
                rows.iter().map(|r| r.top1_target).collect::<Vec<_>>(),
                rows.iter().map(|r| r.top5_target).collect::<Vec<_>>(),
                rows.iter().map(|r| r.cs_target).collect::<Vec<_>>(),
            ),
        ] {
            let top1 = top1s.iter().filter(|&&b| b).count() as f64 / n as f64;
            let top5 = top5s.iter().filter(|&&b| b).count() as f64 / n as f64;
            let mean = css.iter().sum::<f64>() / n as f64;
            let var = (css.iter().map(|c| c * c).sum::<f64>() / n as f64 - mean * mean).max(0.0);
            cells.insert(
                (method.clone(), input.clone(), label.to_string()),
                MetricSummary {
                    top1,
                    top5,
                    cs_mean: mean,
                    cs_std: var.sqrt(),
                    n,
                },
            );
        }
    }
    cells
}

/// Parse a grid_records.csv produced by [`grid_records_csv`].
pub fn parse_grid_records(text: &str) -> Result<Vec<GridRecordRow>> {
    let mut lines = text.lines();
    let header = lines.next().context("empty records file")?;
    if header != GRID_RECORDS_HEADER {
        bail!("unexpected records header: {header}");
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            bail!("line {}: expected 11 fields, got {}", lineno + 2, f.len());
        }
        rows.push(GridRecordRow {
            method: f[0].into(),
            input_kind: f[1].into(),
            sample_id: f[2].parse().context("sample_id")?,
            true_label: f[3].parse().context("true_label")?,
            target_label: f[4].parse().context("target_label")?,
            top1_original: f[5] == "1",
            top5_original: f[6] == "1",
            cs_original: f[7].parse().context("cs_original")?,
            top1_target: f[8] == "1",
            top5_target: f[9] == "1",
            cs_target: f[10].parse().context("cs_target")?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_examples() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig(123456789.0), "123457000");
        assert_eq!(fmt_sig(-0.000123456789), "-0.000123457");
        assert_eq!(fmt_sig(0.8000000000000002), "0.8");
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0].into_iter()), 2.5);
    }

    #[test]
    fn histogram_clamps_to_range() {
        // bins are half-open, the last closed; out-of-range values clamp
        let counts = histogram([-0.5, 0.0, 0.5, 1.0, 2.0].into_iter(), 0.0, 1.0, 2);
        assert_eq!(counts, vec![2, 3]);
    }
}
