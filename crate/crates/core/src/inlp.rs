//! Iterative nullspace projection: fit a linear probe for the protected
//! attribute, remove the probe's directions from the representation, repeat.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::balance::{compute_weights_with, downsample_indices, BalanceObjective, WeightConvention, WeightVector};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, FairnessReport};
use crate::model::{Model, ModelSpec};
use crate::par::{self, Execution};
use crate::train::{train, TrainConfig, TrainOutcome};
use crate::tuning::SelectionRule;

/// Solver settings shared by probes and the final linear classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// L2 penalty on the weights (not the bias).
    #[serde(default = "default_regularization")]
    pub regularization: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop once the largest gradient entry falls below this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_regularization() -> f64 {
    1e-4
}

fn default_max_iter() -> usize {
    2000
}

fn default_tolerance() -> f64 {
    1e-6
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            regularization: default_regularization(),
            max_iter: default_max_iter(),
            tolerance: default_tolerance(),
        }
    }
}

/// Multinomial logistic regression with class 0 as the reference: one weight
/// row per non-reference class (a single row for binary problems).
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl LogisticRegression {
    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() || weights.nrows() == 0 {
            return Err(Error::shape(weights.nrows(), bias.len()));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn class_count(&self) -> usize {
        self.weights.nrows() + 1
    }

    /// Weight rows, one per non-reference class.
    pub fn directions(&self) -> Vec<Array1<f64>> {
        self.weights.outer_iter().map(|r| r.to_owned()).collect()
    }

    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let mut s = Array2::zeros((n, self.class_count()));
        let z = x.dot(&self.weights.t()) + &self.bias;
        s.slice_mut(ndarray::s![.., 1..]).assign(&z);
        s
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        crate::model::argmax_rows(&self.scores(x))
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, targets: &[usize]) -> f64 {
        let hits = self.predict(x).iter().zip(targets).filter(|(p, t)| p == t).count();
        hits as f64 / targets.len() as f64
    }

    /// Deterministic accelerated full-batch gradient descent from zero, with
    /// step `1/L` for a Lipschitz bound `L` from power iteration on the
    /// centred second-moment matrix.
    pub fn fit(
        x: ArrayView2<f64>,
        targets: &[usize],
        class_count: usize,
        sample_weights: Option<&[f64]>,
        solver: &SolverConfig,
    ) -> Result<Self> {
        let (n, d) = x.dim();
        if targets.len() != n || n == 0 {
            return Err(Error::shape(n, targets.len()));
        }
        if class_count < 2 || targets.iter().any(|&t| t >= class_count) {
            return Err(Error::InvalidArgument("targets out of range".into()));
        }
        let weights: Vec<f64> = match sample_weights {
            Some(w) if w.len() != n => return Err(Error::shape(n, w.len())),
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let weight_sum: f64 = weights.iter().sum();
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let xc = &x - &mean;
        let k = class_count - 1;

        let lipschitz = 0.5 * (top_eigenvalue(&xc, &weights, weight_sum) + 1.0) + solver.regularization;
        let step = 1.0 / lipschitz;

        let mut w = Array2::<f64>::zeros((k, d));
        let mut b = Array1::<f64>::zeros(k);
        let (mut w_prev, mut b_prev) = (w.clone(), b.clone());
        let mut t_prev = 1.0f64;
        for _ in 0..solver.max_iter {
            let t = (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt()) / 2.0;
            let momentum = (t_prev - 1.0) / t;
            let yw = &w + &((&w - &w_prev) * momentum);
            let yb = &b + &((&b - &b_prev) * momentum);
            let (gw, gb) = gradient(&xc, targets, &weights, weight_sum, &yw, &yb, solver.regularization);
            let largest = gw.iter().chain(gb.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            w_prev = w;
            b_prev = b;
            w = &yw - &(&gw * step);
            b = &yb - &(&gb * step);
            // restart the momentum once it points uphill
            let uphill = (&gw * &(&w - &w_prev)).sum() + (&gb * &(&b - &b_prev)).sum();
            t_prev = if uphill > 0.0 { 1.0 } else { t };
            if largest < solver.tolerance {
                break;
            }
        }
        // undo centring: w·(x − μ) + b = w·x + (b − w·μ)
        let bias = &b - &w.dot(&mean);
        Ok(Self { weights: w, bias })
    }
}

fn top_eigenvalue(xc: &Array2<f64>, weights: &[f64], weight_sum: f64) -> f64 {
    let d = xc.ncols();
    let wcol = Array1::from(weights.to_vec()).insert_axis(Axis(1));
    let mut v = Array1::<f64>::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let xv = xc.dot(&v).insert_axis(Axis(1)) * &wcol;
        let next = xc.t().dot(&xv.column(0)) / weight_sum;
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next / norm;
    }
    lambda
}

fn gradient(
    xc: &Array2<f64>,
    targets: &[usize],
    weights: &[f64],
    weight_sum: f64,
    w: &Array2<f64>,
    b: &Array1<f64>,
    reg: f64,
) -> (Array2<f64>, Array1<f64>) {
    let z = xc.dot(&w.t()) + b;
    let mut resid = Array2::<f64>::zeros(z.raw_dim());
    for (i, (zr, mut rr)) in z.outer_iter().zip(resid.outer_iter_mut()).enumerate() {
        let max = zr.iter().cloned().fold(0.0f64, f64::max);
        let denom = (-max).exp() + zr.iter().map(|v| (v - max).exp()).sum::<f64>();
        for (j, r) in rr.iter_mut().enumerate() {
            let p = (zr[j] - max).exp() / denom;
            let target = if targets[i] == j + 1 { 1.0 } else { 0.0 };
            *r = weights[i] * (p - target) / weight_sum;
        }
    }
    let gw = resid.t().dot(xc) + w * reg;
    let gb = resid.sum_axis(Axis(0));
    (gw, gb)
}

/// Protected-attribute probe and its training accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub model: LogisticRegression,
    pub accuracy: f64,
}

pub fn fit_linear_probe(
    representations: ArrayView2<f64>,
    groups: &[usize],
    group_count: usize,
    solver: &SolverConfig,
) -> Result<LinearProbe> {
    let mut present = vec![false; group_count];
    for &g in groups {
        if g >= group_count {
            return Err(Error::InvalidArgument(format!("group {g} out of range")));
        }
        present[g] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument("probe needs at least two groups present".into()));
    }
    let model = LogisticRegression::fit(representations, groups, group_count, None, solver)?;
    let accuracy = model.accuracy(representations, groups);
    Ok(LinearProbe { model, accuracy })
}

/// Share of the most frequent group.
pub fn majority_rate(groups: &[usize], group_count: usize) -> f64 {
    let mut counts = vec![0usize; group_count];
    for &g in groups {
        counts[g] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / groups.len().max(1) as f64
}

/// Removes from `v` its components along `basis` (orthonormal), twice for
/// numerical stability. Returns the unit residual, or `None` if `v` lies in
/// the span of `basis`.
fn orthonormalize(v: &Array1<f64>, basis: &[Array1<f64>]) -> Option<Array1<f64>> {
    let scale = v.dot(v).sqrt();
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    let mut r = v / scale;
    for _ in 0..2 {
        for u in basis {
            let c = r.dot(u);
            r.scaled_add(-c, u);
        }
    }
    let norm = r.dot(&r).sqrt();
    (norm > 1e-8).then(|| r / norm)
}

/// `I − Σ u uᵀ` over orthonormal `basis`.
fn projector(dim: usize, basis: &[Array1<f64>]) -> Array2<f64> {
    let mut p = Array2::<f64>::eye(dim);
    for u in basis {
        for i in 0..dim {
            for j in 0..dim {
                p[[i, j]] -= u[i] * u[j];
            }
        }
    }
    p
}

/// Orthogonal projection onto the complement of span(`directions`).
pub fn nullspace_projection(directions: &[Array1<f64>]) -> Result<Array2<f64>> {
    let dim = directions
        .first()
        .map(|d| d.len())
        .ok_or_else(|| Error::InvalidArgument("no directions given".into()))?;
    let mut basis = Vec::new();
    for d in directions {
        if d.len() != dim {
            return Err(Error::shape(dim, d.len()));
        }
        if let Some(u) = orthonormalize(d, &basis) {
            basis.push(u);
        }
    }
    if basis.is_empty() {
        return Err(Error::InvalidArgument("all directions are zero".into()));
    }
    Ok(projector(dim, &basis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpIteration {
    /// Probe accuracy on the representations entering this iteration.
    pub probe_accuracy: f64,
    /// Directions that survived orthonormalisation.
    pub added_directions: usize,
}

/// Removed directions (orthonormal) and the composed projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    dim: usize,
    directions: Vec<Array1<f64>>,
    projection: Array2<f64>,
    pub iterations: Vec<InlpIteration>,
    pub majority_rate: f64,
}

impl ProjectionStack {
    pub fn from_directions(dim: usize, directions: Vec<Array1<f64>>) -> Result<Self> {
        let mut stack = Self {
            dim,
            directions: Vec::new(),
            projection: Array2::eye(dim),
            iterations: Vec::new(),
            majority_rate: 0.0,
        };
        for d in &directions {
            stack.push(d)?;
        }
        if stack.directions.is_empty() {
            return Err(Error::InvalidArgument("a projection stack needs a direction".into()));
        }
        Ok(stack)
    }

    fn push(&mut self, direction: &Array1<f64>) -> Result<bool> {
        if direction.len() != self.dim {
            return Err(Error::shape(self.dim, direction.len()));
        }
        match orthonormalize(direction, &self.directions) {
            Some(u) => {
                self.directions.push(u);
                self.projection = projector(self.dim, &self.directions);
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn directions(&self) -> &[Array1<f64>] {
        &self.directions
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    /// `d −` number of removed directions.
    pub fn rank(&self) -> usize {
        self.dim - self.directions.len()
    }

    /// Projection built from the first `count` directions only.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        Self::from_directions(self.dim, self.directions[..count.min(self.directions.len())].to_vec())
    }

    /// `x ↦ P·x` for every row.
    pub fn apply(&self, representations: ArrayView2<f64>) -> Result<Array2<f64>> {
        if representations.ncols() != self.dim {
            return Err(Error::shape(self.dim, representations.ncols()));
        }
        Ok(representations.dot(&self.projection))
    }

    /// `d`, the direction count, then each direction, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dim * self.directions.len());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.directions.len() as u64).to_le_bytes());
        for d in &self.directions {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|b| b.try_into().expect("8 bytes"))
                .ok_or_else(|| Error::parse("projection stack", format!("offset {}", i * 8), "truncated"))
        };
        let dim = u64::from_le_bytes(word(0)?) as usize;
        let count = u64::from_le_bytes(word(1)?) as usize;
        if bytes.len() != 16 + 8 * dim * count {
            return Err(Error::parse(
                "projection stack",
                format!("offset {}", bytes.len()),
                format!("expected {} bytes", 16 + 8 * dim * count),
            ));
        }
        let mut dirs = Vec::with_capacity(count);
        for k in 0..count {
            let v: Result<Vec<f64>> =
                (0..dim).map(|j| word(2 + k * dim + j).map(f64::from_le_bytes)).collect();
            dirs.push(Array1::from(v?));
        }
        Self::from_directions(dim, dirs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Free-function form of [`ProjectionStack::apply`].
pub fn apply_projection(stack: &ProjectionStack, representations: ArrayView2<f64>) -> Result<Array2<f64>> {
    stack.apply(representations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlpConfig {
    pub iterations: usize,
    /// Stop once probe accuracy is within this many accuracy points of the
    /// majority rate.
    #[serde(default = "default_stop_margin")]
    pub stop_margin: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_stop_margin() -> f64 {
    0.02
}

/// Repeatedly fits a probe on the projected representations and removes its
/// directions. The first iteration always removes its directions; later ones
/// stop early once the probe is no better than majority + `stop_margin`.
pub fn run_inlp(
    representations: ArrayView2<f64>,
    groups: &[usize],
    group_count: usize,
    config: &InlpConfig,
) -> Result<ProjectionStack> {
    let dim = representations.ncols();
    if config.iterations == 0 {
        return Err(Error::InvalidArgument("INLP needs at least one iteration".into()));
    }
    if config.iterations > dim {
        return Err(Error::InvalidArgument(format!(
            "{} iterations exceed the representation width {dim}",
            config.iterations
        )));
    }
    let majority = majority_rate(groups, group_count);
    let mut stack: Option<ProjectionStack> = None;
    let mut records = Vec::new();
    for it in 0..config.iterations {
        let current = match &stack {
            Some(s) => s.apply(representations)?,
            None => representations.to_owned(),
        };
        let probe = fit_linear_probe(current.view(), groups, group_count, &config.solver)?;
        if it > 0 && probe.accuracy <= majority + config.stop_margin {
            records.push(InlpIteration {
                probe_accuracy: probe.accuracy,
                added_directions: 0,
            });
            break;
        }
        let added = match stack.as_mut() {
            None => {
                let s = ProjectionStack::from_directions(dim, probe.model.directions())?;
                let n = s.directions.len();
                stack = Some(s);
                n
            }
            Some(s) => {
                let mut n = 0;
                for d in probe.model.directions() {
                    n += usize::from(s.push(&d)?);
                }
                n
            }
        };
        log::debug!("INLP iteration {it}: probe accuracy {:.4}, removed {added}", probe.accuracy);
        records.push(InlpIteration {
            probe_accuracy: probe.accuracy,
            added_directions: added,
        });
        if added == 0 {
            break;
        }
    }
    let mut stack = stack.expect("first iteration always builds the stack");
    stack.iterations = records;
    stack.majority_rate = majority;
    Ok(stack)
}

/// Training regime of the encoder whose representations INLP debiases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Standard,
    Rw,
    Ds,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub base: BaseKind,
    pub objective: BalanceObjective,
    pub convention: WeightConvention,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub inlp: InlpConfig,
    /// Pick the number of removed directions per run on dev, using the
    /// lowest dev GAP within `threshold_offset` of the best dev accuracy.
    pub select_iterations: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub base: TrainOutcome,
    pub stack: ProjectionStack,
    /// Directions actually used by the final classifier.
    pub directions_used: usize,
    pub classifier: LogisticRegression,
    pub dev_predictions: Vec<usize>,
    pub test_predictions: Vec<usize>,
}

/// Trains the base encoder (plain, reweighted or down-sampled), debiases its
/// last hidden layer with INLP and fits a linear classifier on top.
pub fn inlp_pipeline(splits: &Splits, config: &PipelineConfig) -> Result<PipelineOutcome> {
    let Splits { train: train_set, dev, test } = splits;
    let (fit_set, weights) = match config.base {
        BaseKind::Standard => (train_set.clone(), WeightVector::ones(train_set.len())),
        BaseKind::Rw => (
            train_set.clone(),
            compute_weights_with(train_set, &config.objective, config.convention)?,
        ),
        BaseKind::Ds => {
            let idx = downsample_indices(train_set, &config.objective, config.seed)?;
            let ds = train_set.subset(&idx)?;
            let n = ds.len();
            (ds, WeightVector::ones(n))
        }
    };
    let base = train(&config.model, &fit_set, dev, &weights, None, &config.train)?;
    let Model::Standard(encoder) = &base.model else {
        return Err(Error::Unsupported("INLP pipelines use the standard model".into()));
    };
    let rep = |d: &Dataset| encoder.penultimate(d.features().view());
    let (train_rep, dev_rep, test_rep) = (rep(&fit_set)?, rep(dev)?, rep(test)?);
    let stack = run_inlp(train_rep.view(), fit_set.groups(), fit_set.group_count(), &config.inlp)?;

    let fit_final = |s: &ProjectionStack| -> Result<(LogisticRegression, Vec<usize>)> {
        let clf = LogisticRegression::fit(
            s.apply(train_rep.view())?.view(),
            fit_set.labels(),
            fit_set.label_count(),
            None,
            &config.inlp.solver,
        )?;
        let dev_pred = clf.predict(s.apply(dev_rep.view())?.view());
        Ok((clf, dev_pred))
    };

    let total = stack.directions().len();
    let counts: Vec<usize> = if config.select_iterations { (1..=total).collect() } else { vec![total] };
    let mut candidates = par::try_map_range(counts.len(), Execution::Parallel, |i| {
        let k = counts[i];
        let s = stack.truncated(k)?;
        let (clf, dev_pred) = fit_final(&s)?;
        let report = FairnessReport::from_record(&EvalRecord::for_dataset(dev_pred.clone(), dev)?, 0)?;
        Ok::<_, Error>((k, s, clf, dev_pred, report))
    })?;
    let rows: Vec<(f64, f64)> = candidates.iter().map(|c| (c.4.accuracy, c.4.rms_gap)).collect();
    let rule = SelectionRule::min_gap_at_threshold(config.train.threshold_offset);
    let chosen = rule.select(&rows, |a, b| rows[b].0.total_cmp(&rows[a].0).then(a.cmp(&b)))?;
    let (k, s, classifier, dev_predictions, _) = candidates.swap_remove(chosen);
    let test_predictions = classifier.predict(s.apply(test_rep.view())?.view());
    Ok(PipelineOutcome {
        base,
        stack,
        directions_used: k,
        classifier,
        dev_predictions,
        test_predictions,
    })
}
