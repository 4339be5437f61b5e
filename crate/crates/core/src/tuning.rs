//! Fairness-constrained model selection: grid search over training settings
//! and the α/β sweep over soft gating coefficients.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, FairnessReport};
use crate::model::{GatePolicy, Inference, Model};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    MaxAccuracy,
    #[default]
    MinGapAtThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRule {
    #[serde(default)]
    pub mode: SelectionMode,
    /// Absolute accuracy points below the best dev accuracy still accepted.
    #[serde(default = "default_offset")]
    pub threshold_offset: f64,
}

fn default_offset() -> f64 {
    0.02
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            mode: SelectionMode::default(),
            threshold_offset: default_offset(),
        }
    }
}

impl SelectionRule {
    pub fn max_accuracy() -> Self {
        Self {
            mode: SelectionMode::MaxAccuracy,
            threshold_offset: default_offset(),
        }
    }

    pub fn min_gap_at_threshold(threshold_offset: f64) -> Self {
        Self {
            mode: SelectionMode::MinGapAtThreshold,
            threshold_offset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_offset >= 0.0 && self.threshold_offset.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "threshold_offset must be a non-negative number, got {}",
                self.threshold_offset
            )));
        }
        Ok(())
    }

    /// Picks one of `(accuracy, gap)` rows. `tie_break` orders equally good
    /// candidates by index; the first (least) wins.
    pub fn select(&self, rows: &[(f64, f64)], tie_break: impl Fn(usize, usize) -> Ordering) -> Result<usize> {
        self.validate()?;
        if rows.is_empty() {
            return Err(Error::InvalidArgument("nothing to select from".into()));
        }
        let best = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        let threshold = best - self.threshold_offset;
        let chosen = (0..rows.len())
            .filter(|&i| match self.mode {
                SelectionMode::MaxAccuracy => rows[i].0 == best,
                SelectionMode::MinGapAtThreshold => rows[i].0 >= threshold,
            })
            .min_by(|&a, &b| match self.mode {
                SelectionMode::MaxAccuracy => tie_break(a, b),
                SelectionMode::MinGapAtThreshold => {
                    rows[a].1.total_cmp(&rows[b].1).then_with(|| tie_break(a, b))
                }
            })
            .expect("the best-accuracy row always qualifies");
        Ok(chosen)
    }
}

/// Named axes of candidate values; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchSpace {
    axes: Vec<(String, Vec<f64>)>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn axis(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("axis `{name}` has no values")));
        }
        if self.axes.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument(format!("axis `{name}` given twice")));
        }
        self.axes.push((name, values));
        Ok(self)
    }

    pub fn axes(&self) -> &[(String, Vec<f64>)] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        if self.axes.is_empty() {
            0
        } else {
            self.axes.iter().map(|(_, v)| v.len()).product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point `index`, with the last axis varying fastest.
    pub fn point(&self, index: usize) -> GridPoint {
        let mut rest = index;
        let mut values = vec![(String::new(), 0.0); self.axes.len()];
        for (slot, (name, vals)) in values.iter_mut().zip(&self.axes).rev() {
            *slot = (name.clone(), vals[rest % vals.len()]);
            rest /= vals.len();
        }
        GridPoint { index, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// Position in grid order; use it to key per-cell random streams.
    pub index: usize,
    pub values: Vec<(String, f64)>,
}

impl GridPoint {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub config: serde_json::Map<String, serde_json::Value>,
    pub dev_accuracy: f64,
    pub dev_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub table: Vec<GridRow>,
    pub selected: usize,
}

impl GridResult {
    pub fn selected_row(&self) -> &GridRow {
        &self.table[self.selected]
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.table {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Evaluates every grid point (concurrently unless `exec` is sequential) and
/// applies `rule`. Ties go to higher accuracy, then grid order.
pub fn grid_search<F>(space: &SearchSpace, evaluator: F, rule: &SelectionRule, exec: Execution) -> Result<GridResult>
where
    F: Fn(&GridPoint) -> Result<(f64, f64)> + Sync,
{
    if space.is_empty() {
        return Err(Error::InvalidArgument("empty search space".into()));
    }
    let scores = par::try_map_range(space.len(), exec, |i| evaluator(&space.point(i)))?;
    let selected = rule.select(&scores, |a, b| scores[b].0.total_cmp(&scores[a].0).then(a.cmp(&b)))?;
    let table = scores
        .iter()
        .enumerate()
        .map(|(i, &(dev_accuracy, dev_gap))| GridRow {
            index: i,
            config: space
                .point(i)
                .values
                .into_iter()
                .map(|(n, v)| (n, serde_json::Value::from(v)))
                .collect(),
            dev_accuracy,
            dev_gap,
        })
        .collect();
    Ok(GridResult { table, selected })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
    pub rms_gap: f64,
}

/// α×β grid, α-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMatrix {
    pub resolution: usize,
    pub cells: Vec<SweepCell>,
}

impl SweepMatrix {
    pub fn cell(&self, alpha_index: usize, beta_index: usize) -> &SweepCell {
        &self.cells[alpha_index * self.resolution + beta_index]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,accuracy,rms_gap\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{}", c.alpha, c.beta, c.accuracy, c.rms_gap);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Grid coordinate `i` of `resolution` points spanning [0, 1].
pub fn grid_value(i: usize, resolution: usize) -> f64 {
    i as f64 / (resolution - 1) as f64
}

/// Dev metrics for a single (α, β) cell.
pub fn sweep_cell(model: &Model, dev: &Dataset, alpha: f64, beta: f64) -> Result<SweepCell> {
    let inference = Inference::Gate(GatePolicy::Soft { alpha, beta });
    let preds = model.predict(dev.features().view(), dev.groups(), &inference, Execution::Sequential)?;
    let report = FairnessReport::from_record(&EvalRecord::for_dataset(preds, dev)?, 0)?;
    Ok(SweepCell {
        alpha,
        beta,
        accuracy: report.accuracy,
        rms_gap: report.rms_gap,
    })
}

/// Evaluates soft gating over the uniform α×β grid on `dev` without
/// retraining. Each instance keeps its gold group.
pub fn alpha_beta_sweep(model: &Model, dev: &Dataset, resolution: usize, exec: Execution) -> Result<SweepMatrix> {
    if !matches!(model, Model::Gated(_)) {
        return Err(Error::Unsupported("the coefficient sweep needs a gated model".into()));
    }
    if dev.group_count() != 2 {
        return Err(Error::Unsupported("the coefficient sweep needs |G|=2".into()));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!("sweep resolution {resolution} < 2")));
    }
    let cells = par::try_map_range(resolution * resolution, exec, |k| {
        sweep_cell(model, dev, grid_value(k / resolution, resolution), grid_value(k % resolution, resolution))
    })?;
    Ok(SweepMatrix { resolution, cells })
}

/// Applies `rule` over the sweep cells; ties go to the lower α+β, then grid
/// order.
pub fn select_coefficients(matrix: &SweepMatrix, rule: &SelectionRule) -> Result<(f64, f64)> {
    let rows: Vec<(f64, f64)> = matrix.cells.iter().map(|c| (c.accuracy, c.rms_gap)).collect();
    let cells = &matrix.cells;
    let i = rule.select(&rows, |a, b| {
        (cells[a].alpha + cells[a].beta)
            .total_cmp(&(cells[b].alpha + cells[b].beta))
            .then(a.cmp(&b))
    })?;
    Ok((cells[i].alpha, cells[i].beta))
}
