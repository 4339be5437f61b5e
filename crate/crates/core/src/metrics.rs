//! Accuracy, separation-based fairness gaps, the accuracy/fairness trade-off
//! score and multi-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Predictions alongside gold labels and groups.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    predictions: Vec<usize>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    label_count: usize,
    group_count: usize,
}

impl EvalRecord {
    pub fn new(
        predictions: Vec<usize>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        label_count: usize,
        group_count: usize,
    ) -> Result<Self> {
        if predictions.len() != labels.len() || labels.len() != groups.len() {
            return Err(Error::shape(
                format!("{} predictions, labels and groups", labels.len()),
                format!("{}/{}/{}", predictions.len(), labels.len(), groups.len()),
            ));
        }
        if predictions.iter().chain(&labels).any(|&v| v >= label_count)
            || groups.iter().any(|&g| g >= group_count)
        {
            return Err(Error::InvalidArgument("label, prediction or group out of range".into()));
        }
        Ok(Self {
            predictions,
            labels,
            groups,
            label_count,
            group_count,
        })
    }

    pub fn for_dataset(predictions: Vec<usize>, dataset: &Dataset) -> Result<Self> {
        Self::new(
            predictions,
            dataset.labels().to_vec(),
            dataset.groups().to_vec(),
            dataset.label_count(),
            dataset.group_count(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }

    /// Same record with the two group ids exchanged.
    pub fn swap_groups(&self) -> Result<Self> {
        if self.group_count != 2 {
            return Err(Error::Unsupported("group exchange needs |G|=2".into()));
        }
        Self::new(
            self.predictions.clone(),
            self.labels.clone(),
            self.groups.iter().map(|&g| 1 - g).collect(),
            self.label_count,
            2,
        )
    }
}

pub fn accuracy(record: &EvalRecord) -> Result<f64> {
    if record.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty record".into()));
    }
    let correct = record
        .predictions
        .iter()
        .zip(&record.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / record.len() as f64)
}

/// `|TPR(g=0, c) − TPR(g=1, c)|` per class `c`; `None` where either group has
/// no gold instances of `c`.
pub fn tpr_gap_per_class(record: &EvalRecord) -> Result<Vec<Option<f64>>> {
    if record.group_count != 2 {
        return Err(Error::Unsupported(format!(
            "TPR gaps are defined for |G|=2, got |G|={}",
            record.group_count
        )));
    }
    let k = record.label_count;
    let mut gold = vec![[0u64; 2]; k];
    let mut hit = vec![[0u64; 2]; k];
    for ((&p, &y), &g) in record.predictions.iter().zip(&record.labels).zip(&record.groups) {
        gold[y][g] += 1;
        if p == y {
            hit[y][g] += 1;
        }
    }
    let gaps = (0..k)
        .map(|c| {
            if gold[c][0] == 0 || gold[c][1] == 0 {
                log::warn!("class {c} lacks gold instances in one group; excluded from GAP");
                return None;
            }
            let tpr0 = hit[c][0] as f64 / gold[c][0] as f64;
            let tpr1 = hit[c][1] as f64 / gold[c][1] as f64;
            Some((tpr0 - tpr1).abs())
        })
        .collect();
    Ok(gaps)
}

/// Quadratic mean of the gaps.
pub fn rms_gap(gaps: &[f64]) -> Result<f64> {
    if gaps.is_empty() {
        return Err(Error::InvalidArgument("RMS of an empty gap vector".into()));
    }
    Ok((gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).sqrt())
}

/// Distance to the ideal point after normalising accuracy and `1 − gap` by
/// the best values observed for the dataset. Lower is better.
pub fn tradeoff(accuracy: f64, gap: f64, best_accuracy: f64, best_gap: f64) -> Result<f64> {
    let in_unit = |v: f64| v > 0.0 && v <= 1.0;
    if !in_unit(accuracy) || !in_unit(best_accuracy) {
        return Err(Error::InvalidArgument("accuracies must lie in (0, 1]".into()));
    }
    if !(0.0..1.0).contains(&gap) || !(0.0..1.0).contains(&best_gap) {
        return Err(Error::InvalidArgument("gaps must lie in [0, 1)".into()));
    }
    let x = accuracy / best_accuracy;
    let y = (1.0 - gap) / (1.0 - best_gap);
    if x > 1.0 + 1e-12 || y > 1.0 + 1e-12 {
        log::warn!("trade-off reference is not the best point (x = {x}, y = {y})");
    }
    Ok(((1.0 - x).powi(2) + (1.0 - y).powi(2)).sqrt())
}

/// Headline evaluation numbers for one model and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    /// Per-class TPR gap; `null` for classes missing from one group.
    pub per_class_tpr_gap: Vec<Option<f64>>,
    /// RMS over the defined per-class TPR gaps.
    pub rms_gap: f64,
    /// TNR gap of a binary task (the class-0 TPR gap).
    pub tnr_gap: Option<f64>,
    pub tradeoff: Option<f64>,
    pub seed: u64,
}

impl FairnessReport {
    pub fn from_record(record: &EvalRecord, seed: u64) -> Result<Self> {
        let accuracy = accuracy(record)?;
        let per_class = tpr_gap_per_class(record)?;
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let rms_gap = rms_gap(&defined)
            .map_err(|_| Error::InvalidArgument("no class has gold instances in both groups".into()))?;
        let tnr_gap = if record.label_count == 2 { per_class[0] } else { None };
        Ok(Self {
            accuracy,
            per_class_tpr_gap: per_class,
            rms_gap,
            tnr_gap,
            tradeoff: None,
            seed,
        })
    }

    pub fn with_tradeoff(mut self, best_accuracy: f64, best_gap: f64) -> Result<Self> {
        self.tradeoff = Some(tradeoff(self.accuracy, self.rms_gap, best_accuracy, best_gap)?);
        Ok(self)
    }
}

/// Numeric fields of a report, used for both the mean and the deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportStats {
    pub accuracy: f64,
    pub rms_gap: f64,
    pub tnr_gap: Option<f64>,
    pub tradeoff: Option<f64>,
    pub per_class_tpr_gap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub mean: ReportStats,
    pub std: ReportStats,
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[FairnessReport]) -> Result<Aggregate> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let field = |get: &dyn Fn(&FairnessReport) -> f64| {
        mean_std(&reports.iter().map(get).collect::<Vec<_>>())
    };
    let optional = |get: &dyn Fn(&FairnessReport) -> Option<f64>| {
        reports
            .iter()
            .map(get)
            .collect::<Option<Vec<f64>>>()
            .map(|v| mean_std(&v))
    };
    let (acc_m, acc_s) = field(&|r| r.accuracy);
    let (gap_m, gap_s) = field(&|r| r.rms_gap);
    let tnr = optional(&|r| r.tnr_gap);
    let trade = optional(&|r| r.tradeoff);
    let classes = reports.iter().map(|r| r.per_class_tpr_gap.len()).max().unwrap_or(0);
    let per_class: Vec<Option<(f64, f64)>> = (0..classes)
        .map(|c| optional(&|r| r.per_class_tpr_gap.get(c).copied().flatten()))
        .collect();
    Ok(Aggregate {
        runs: reports.len(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        mean: ReportStats {
            accuracy: acc_m,
            rms_gap: gap_m,
            tnr_gap: tnr.map(|t| t.0),
            tradeoff: trade.map(|t| t.0),
            per_class_tpr_gap: per_class.iter().map(|p| p.map(|t| t.0)).collect(),
        },
        std: ReportStats {
            accuracy: acc_s,
            rms_gap: gap_s,
            tnr_gap: tnr.map(|t| t.1),
            tradeoff: trade.map(|t| t.1),
            per_class_tpr_gap: per_class.iter().map(|p| p.map(|t| t.1)).collect(),
        },
    })
}
