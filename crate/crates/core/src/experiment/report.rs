//! Multi-seed aggregation of completed runs into one row per configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_run, RunRecord, RunTiming, RUN_FILE};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, mean_std, tradeoff, FairnessReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub config_hash: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub accuracy: MeanStd,
    pub rms_gap: MeanStd,
    pub tnr_gap: Option<MeanStd>,
    /// From the mean accuracy and mean GAP, against the table's bests.
    pub tradeoff: f64,
    pub seconds: MeanStd,
    /// Mean wall-clock over the baseline's mean; `None` without a baseline.
    pub relative_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub best_accuracy: f64,
    pub best_gap: f64,
    pub rows: Vec<ReportRow>,
}

/// A completed run as found on disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub timing: RunTiming,
}

/// Run directories among `paths`: each path is a run directory itself or a
/// root whose immediate children are. Directories without `run.json` are
/// incomplete and skipped.
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    let mut dirs = BTreeSet::new();
    for p in paths {
        if p.join(RUN_FILE).is_file() {
            dirs.insert(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| Error::io(p, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(p, e))?.path();
            if path.join(RUN_FILE).is_file() {
                dirs.insert(path);
            }
        }
    }
    dirs.into_iter()
        .map(|dir| {
            let (record, timing) = load_run(&dir)?;
            Ok(LoadedRun { dir, record, timing })
        })
        .collect()
}

/// Groups runs by config hash, checks every expected seed is present, and
/// builds the aggregated table. The baseline row comes first, the rest
/// follow by label.
pub fn build_report(runs: &[LoadedRun]) -> Result<ReportTable> {
    if runs.is_empty() {
        return Err(Error::MissingRuns("no completed runs found".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.record.config_hash.as_str()).or_default().push(r);
    }

    let mut missing = Vec::new();
    for members in groups.values() {
        let first = &members[0].record;
        let present: BTreeSet<u64> = members.iter().map(|r| r.record.seed).collect();
        let absent: Vec<String> = first
            .expected_seeds
            .iter()
            .filter(|s| !present.contains(s))
            .map(|s| s.to_string())
            .collect();
        if !absent.is_empty() {
            missing.push(format!("{} ({}): seeds {}", first.label, first.config_hash, absent.join(", ")));
        } else if members.len() < 2 {
            missing.push(format!("{} ({}): needs at least 2 seeds, found 1", first.label, first.config_hash));
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingRuns(missing.join("; ")));
    }

    struct Partial {
        label: String,
        hash: String,
        baseline: bool,
        seeds: Vec<u64>,
        accuracy: MeanStd,
        rms_gap: MeanStd,
        tnr_gap: Option<MeanStd>,
        seconds: MeanStd,
    }
    let mut partial = Vec::new();
    for (hash, members) in &groups {
        let mut members = members.clone();
        members.sort_by_key(|r| r.record.seed);
        let reports: Vec<FairnessReport> = members.iter().map(|r| r.record.test.clone()).collect();
        let agg = aggregate(&reports)?;
        let (sm, ss) = mean_std(&members.iter().map(|r| r.timing.seconds).collect::<Vec<_>>());
        partial.push(Partial {
            label: members[0].record.label.clone(),
            hash: hash.to_string(),
            baseline: members[0].record.baseline,
            seeds: agg.seeds.clone(),
            accuracy: MeanStd { mean: agg.mean.accuracy, std: agg.std.accuracy },
            rms_gap: MeanStd { mean: agg.mean.rms_gap, std: agg.std.rms_gap },
            tnr_gap: agg.mean.tnr_gap.zip(agg.std.tnr_gap).map(|(mean, std)| MeanStd { mean, std }),
            seconds: MeanStd { mean: sm, std: ss },
        });
    }
    partial.sort_by(|a, b| b.baseline.cmp(&a.baseline).then(a.label.cmp(&b.label)).then(a.hash.cmp(&b.hash)));

    let best_accuracy = partial.iter().map(|p| p.accuracy.mean).fold(f64::NEG_INFINITY, f64::max);
    let best_gap = partial.iter().map(|p| p.rms_gap.mean).fold(f64::INFINITY, f64::min);
    let baseline_seconds = partial.iter().find(|p| p.baseline).map(|p| p.seconds.mean);
    let rows = partial
        .into_iter()
        .map(|p| {
            Ok(ReportRow {
                tradeoff: tradeoff(p.accuracy.mean, p.rms_gap.mean, best_accuracy, best_gap)?,
                relative_time: baseline_seconds.filter(|s| *s > 0.0).map(|s| p.seconds.mean / s),
                runs: p.seeds.len(),
                label: p.label,
                config_hash: p.hash,
                seeds: p.seeds,
                accuracy: p.accuracy,
                rms_gap: p.rms_gap,
                tnr_gap: p.tnr_gap,
                seconds: p.seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportTable {
        best_accuracy,
        best_gap,
        rows,
    })
}

pub fn report_dirs(paths: &[PathBuf]) -> Result<ReportTable> {
    build_report(&collect_runs(paths)?)
}

impl ReportTable {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,config_hash,runs,accuracy_mean,accuracy_std,rms_gap_mean,rms_gap_std,tradeoff,relative_time\n",
        );
        for r in &self.rows {
            let time = r.relative_time.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&r.label),
                r.config_hash,
                r.runs,
                r.accuracy.mean,
                r.accuracy.std,
                r.rms_gap.mean,
                r.rms_gap.std,
                r.tradeoff,
                time
            );
        }
        out
    }

    pub fn write(&self, path: &Path, csv: bool) -> Result<()> {
        let text = if csv { self.to_csv() } else { self.to_json()? };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
