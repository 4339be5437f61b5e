//! Weighted cross-entropy, exact gradients and the deterministic training loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::balance::WeightVector;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, FairnessReport};
use crate::model::{GatePolicy, Inference, Model, ModelKind, ModelSpec};
use crate::par::Execution;
use crate::rng::{seeded, streams};

/// `(1/n) Σ_i w_i · (−log softmax(logits_i)[y_i])`.
pub fn weighted_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<f64> {
    Ok(loss_and_gradient(logits, labels, weights)?.0)
}

/// Loss and its gradient with respect to the logits.
pub fn loss_and_gradient(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if labels.len() != n || weights.len() != n {
        return Err(Error::shape(
            format!("{n} labels and weights"),
            format!("{}/{}", labels.len(), weights.len()),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.ncols()) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let scale = 1.0 / n as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, (row, mut g)) in logits.outer_iter().zip(grad.outer_iter_mut()).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let w = weights[i];
        loss += w * (lse - row[labels[i]]);
        for (j, (gj, &v)) in g.iter_mut().zip(row.iter()).enumerate() {
            let p = (v - lse).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            *gj = scale * w * (p - target);
        }
    }
    Ok((loss * scale, grad))
}

/// Weighted loss of one batch and the gradient of every model parameter.
/// `coeffs` are the gate coefficients of the batch rows (gated models only).
pub fn backward(
    model: &Model,
    x: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    coeffs: Option<&Array2<f64>>,
) -> Result<(f64, Model)> {
    let mut grads = model.zeros_like();
    let loss = match (model, &mut grads) {
        (Model::Standard(m), Model::Standard(g)) => {
            if x.ncols() != m.input_dim() {
                return Err(Error::shape(m.input_dim(), x.ncols()));
            }
            let (logits, cache) = m.forward_cached(x);
            let (loss, grad_logits) = loss_and_gradient(&logits, labels, weights)?;
            m.backward(&cache, grad_logits, g);
            loss
        }
        (Model::Gated(m), Model::Gated(g)) => {
            let coeffs = coeffs
                .ok_or_else(|| Error::InvalidArgument("gated model needs gate coefficients".into()))?;
            let (logits, cache) = m.forward_cached(x, coeffs)?;
            let (loss, grad_logits) = loss_and_gradient(&logits, labels, weights)?;
            m.backward(&cache, coeffs, grad_logits, g);
            loss
        }
        _ => unreachable!("gradient model mirrors the model"),
    };
    Ok((loss, grads))
}

/// Largest relative error between [`backward`] and central finite
/// differences with step `h`, over every parameter. The relative error is
/// `|a − n| / max(|a|, |n|, 1e-5)`; the floor keeps parameters with
/// vanishing gradients from dominating through round-off.
pub fn gradient_check_error(
    model: &Model,
    x: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    coeffs: Option<&Array2<f64>>,
    h: f64,
) -> Result<f64> {
    let (_, grads) = backward(model, x, labels, weights, coeffs)?;
    let analytic = grads.params();
    let base = model.params();
    let mut probe = model.clone();
    let mut loss_at = |params: &[f64]| -> Result<f64> {
        probe.set_params(params)?;
        weighted_cross_entropy(&probe.logits(x, coeffs)?, labels, weights)
    };
    let mut worst = 0.0f64;
    let mut shifted = base.clone();
    for (i, &a) in analytic.iter().enumerate() {
        shifted[i] = base[i] + h;
        let up = loss_at(&shifted)?;
        shifted[i] = base[i] - h;
        let down = loss_at(&shifted)?;
        shifted[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Which epoch's parameters `train` returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevSelection {
    FinalEpoch,
    BestDevAccuracy,
    /// Lowest dev GAP among epochs within `threshold_offset` of the best dev accuracy.
    BestDevGapAtThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// Plain gradient descent.
    Sgd,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
    pub dev_selection: DevSelection,
    /// Accuracy slack for `BestDevGapAtThreshold`, in absolute points.
    #[serde(default = "default_threshold_offset")]
    pub threshold_offset: f64,
}

fn default_threshold_offset() -> f64 {
    0.02
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0) {
                return bad("adam decay rates must lie in (0, 1)");
            }
            if epsilon.is_nan() || epsilon <= 0.0 {
                return bad("adam epsilon must be positive");
            }
        }
        if self.threshold_offset.is_nan() || self.threshold_offset < 0.0 {
            return bad("threshold_offset must be non-negative");
        }
        Ok(())
    }
}

/// Adam state over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_accuracy: f64,
    pub dev_rms_gap: Option<f64>,
    /// Wall-clock time; kept out of the serialized history so that reruns
    /// write identical files.
    #[serde(skip_serializing, default)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
    /// 1-based epoch whose parameters were returned.
    pub selected_epoch: usize,
}

/// Dev accuracy and (for binary groups) RMS GAP of a model.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    inference: &Inference,
    seed: u64,
) -> Result<FairnessReport> {
    let preds = model.predict(data.features().view(), data.groups(), inference, Execution::Parallel)?;
    FairnessReport::from_record(&EvalRecord::for_dataset(preds, data)?, seed)
}

fn dev_scores(model: &Model, dev: &Dataset, inference: &Inference) -> Result<(f64, Option<f64>)> {
    let preds = model.predict(dev.features().view(), dev.groups(), inference, Execution::Parallel)?;
    let record = EvalRecord::for_dataset(preds, dev)?;
    let acc = crate::metrics::accuracy(&record)?;
    let gap = if dev.group_count() == 2 {
        FairnessReport::from_record(&record, 0).ok().map(|r| r.rms_gap)
    } else {
        None
    };
    Ok((acc, gap))
}

/// Trains a freshly initialised model. `gate_policy` must be given exactly
/// when the model is gated; it maps each training instance's gold group to
/// gate coefficients, and the same policy is used for dev evaluation.
pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    dev: &Dataset,
    weights: &WeightVector,
    gate_policy: Option<GatePolicy>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = spec.build(config.seed)?;
    train_model(model, train_set, dev, weights, gate_policy, config)
}

/// Like [`train`], starting from the given parameters.
pub fn train_model(
    mut model: Model,
    train_set: &Dataset,
    dev: &Dataset,
    weights: &WeightVector,
    gate_policy: Option<GatePolicy>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if weights.len() != train_set.len() {
        return Err(Error::shape(train_set.len(), weights.len()));
    }
    if model.input_dim() != train_set.dim() || model.input_dim() != dev.dim() {
        return Err(Error::shape(model.input_dim(), train_set.dim()));
    }
    let coeffs = match (model.kind(), gate_policy) {
        (ModelKind::Gated, Some(policy)) => {
            Some(policy.matrix(train_set.groups(), train_set.group_count())?)
        }
        (ModelKind::Standard, None) => None,
        (kind, policy) => {
            return Err(Error::InvalidArgument(format!(
                "gate policy {policy:?} does not fit a {kind} model"
            )))
        }
    };
    let inference = Inference::Gate(gate_policy.unwrap_or(GatePolicy::OneHot));

    let mut params = model.params();
    let mut adam = match config.optimizer {
        Optimizer::Adam { beta1, beta2, epsilon } => Some(Adam::new(params.len(), beta1, beta2, epsilon)),
        Optimizer::Sgd => None,
    };
    let mut rng = seeded(config.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut snapshots: Vec<Vec<f64>> = Vec::with_capacity(config.epochs);
    let features = train_set.features();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let x = features.select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels()[i]).collect();
            let w: Vec<f64> = batch.iter().map(|&i| weights.as_slice()[i]).collect();
            let c = coeffs.as_ref().map(|c| c.select(Axis(0), batch));
            let (loss, grads) = backward(&model, x.view(), &labels, &w, c.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            let grads = grads.params();
            match adam.as_mut() {
                Some(adam) => adam.step(&mut params, &grads, config.learning_rate),
                None => params
                    .iter_mut()
                    .zip(&grads)
                    .for_each(|(p, g)| *p -= config.learning_rate * g),
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: f64::NAN,
                });
            }
            model.set_params(&params)?;
        }
        let (dev_accuracy, dev_rms_gap) = dev_scores(&model, dev, &inference)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss / train_set.len() as f64,
            dev_accuracy,
            dev_rms_gap,
            seconds: started.elapsed().as_secs_f64(),
        });
        if config.dev_selection != DevSelection::FinalEpoch {
            snapshots.push(params.clone());
        }
    }

    let selected = select_epoch(&history, config)?;
    if config.dev_selection != DevSelection::FinalEpoch {
        model.set_params(&snapshots[selected - 1])?;
    }
    Ok(TrainOutcome {
        model,
        history,
        selected_epoch: selected,
    })
}

/// 1-based epoch chosen by the dev-selection rule; ties go to the earliest.
pub fn select_epoch(history: &TrainHistory, config: &TrainConfig) -> Result<usize> {
    let records = &history.epochs;
    if records.is_empty() {
        return Err(Error::InvalidArgument("no epochs recorded".into()));
    }
    let best_acc_epoch = || {
        records
            .iter()
            .fold(&records[0], |best, r| if r.dev_accuracy > best.dev_accuracy { r } else { best })
            .epoch
    };
    match config.dev_selection {
        DevSelection::FinalEpoch => Ok(records[records.len() - 1].epoch),
        DevSelection::BestDevAccuracy => Ok(best_acc_epoch()),
        DevSelection::BestDevGapAtThreshold => {
            let best = records.iter().map(|r| r.dev_accuracy).fold(f64::NEG_INFINITY, f64::max);
            let threshold = best - config.threshold_offset;
            let mut chosen: Option<&EpochRecord> = None;
            for r in records.iter().filter(|r| r.dev_accuracy >= threshold) {
                let gap = r.dev_rms_gap.ok_or_else(|| {
                    Error::Unsupported("GAP-based selection needs binary groups in dev".into())
                })?;
                let better = match chosen {
                    None => true,
                    Some(c) => {
                        let cg = c.dev_rms_gap.expect("checked");
                        gap < cg || (gap == cg && r.dev_accuracy > c.dev_accuracy)
                    }
                };
                if better {
                    chosen = Some(r);
                }
            }
            Ok(chosen.map_or_else(best_acc_epoch, |r| r.epoch))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{compute_weights, BalanceKind, BalanceObjective};
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::{Activation, GatePolicy};
    use ndarray::array;

    fn spec(kind: ModelKind, d: usize) -> ModelSpec {
        ModelSpec {
            kind,
            input_dim: d,
            hidden: 5,
            label_count: 2,
            group_count: 2,
            activation: Activation::Tanh,
        }
    }

    fn config(epochs: usize, batch: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            learning_rate: lr,
            optimizer: Optimizer::default(),
            seed: 3,
            dev_selection: DevSelection::FinalEpoch,
            threshold_offset: 0.02,
        }
    }

    fn synthetic(n: usize, skew: f64, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n,
            d: 4,
            skew,
            class_separation: 2.0,
            group_shift: 1.0,
            noise_std: 1.0,
            seed,
            label_count: 2,
            group_count: 2,
        })
        .unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let loss = weighted_cross_entropy(&array![[0.0, 0.0]], &[1], &[1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_give_mean_cross_entropy() {
        let logits: Array2<f64> = array![[2.0, -1.0], [0.5, 0.25], [-3.0, 4.0]];
        let labels = [0, 1, 0];
        let manual: f64 = logits
            .outer_iter()
            .zip(labels)
            .map(|(r, y)| {
                let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
                -(r[y].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        let loss = weighted_cross_entropy(&logits, &labels, &[1.0; 3]).unwrap();
        assert!((loss - manual).abs() < 1e-14);
    }

    #[test]
    fn weight_two_equals_listing_twice() {
        let a = array![[1.0, -0.5], [0.2, 0.3]];
        let b = array![[1.0, -0.5], [1.0, -0.5], [0.2, 0.3]];
        let la = weighted_cross_entropy(&a, &[1, 0], &[2.0, 1.0]).unwrap() * 2.0;
        let lb = weighted_cross_entropy(&b, &[1, 1, 0], &[1.0; 3]).unwrap() * 3.0;
        assert!((la - lb).abs() < 1e-14);
    }

    #[test]
    fn large_logits_stay_finite() {
        let loss = weighted_cross_entropy(&array![[1000.0, -1000.0]], &[1], &[1.0]).unwrap();
        assert!((loss - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_rows_contribute_no_gradient() {
        let model = spec(ModelKind::Standard, 3).build(1).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let (_, with_row) = backward(&model, x.view(), &[0, 1], &[1.0, 0.0], None).unwrap();
        let (_, alone) = backward(&model, x.slice(ndarray::s![..1, ..]), &[0], &[1.0], None).unwrap();
        // the mean reduction divides by 2 vs 1
        for (a, b) in with_row.params().iter().zip(alone.params()) {
            assert!((a * 2.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unselected_group_encoder_gets_exactly_zero_gradient() {
        let mut model = spec(ModelKind::Gated, 3).build(2).unwrap();
        let params: Vec<f64> = (0..model.num_params()).map(|i| (i as f64 * 0.7).sin() * 0.5).collect();
        model.set_params(&params).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.0, 2.0, -0.5]];
        let coeffs = GatePolicy::OneHot.matrix(&[0, 0, 0], 2).unwrap();
        let (_, grads) = backward(&model, x.view(), &[0, 1, 1], &[1.0; 3], Some(&coeffs)).unwrap();
        let Model::Gated(g) = grads else { unreachable!() };
        let e1 = &g.group_encoders()[1];
        assert!(e1.layers().iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|&v| v == 0.0)));
        let e0 = &g.group_encoders()[0];
        assert!(e0.layers()[0].weights.iter().any(|&v| v != 0.0));

        // mixed batch: row 1 uses encoder 1 only, so encoder 0 sees rows 0 and 2
        let coeffs = GatePolicy::OneHot.matrix(&[0, 1, 0], 2).unwrap();
        let (_, mixed) = backward(&model, x.view(), &[0, 1, 1], &[1.0; 3], Some(&coeffs)).unwrap();
        let keep = [0usize, 2];
        let (_, sub) = backward(
            &model,
            x.select(Axis(0), &keep).view(),
            &[0, 1],
            &[1.0; 2],
            Some(&coeffs.select(Axis(0), &keep)),
        )
        .unwrap();
        let (Model::Gated(mixed), Model::Gated(sub)) = (mixed, sub) else { unreachable!() };
        let a = &mixed.group_encoders()[0].layers()[0].weights;
        let b = &sub.group_encoders()[0].layers()[0].weights;
        for (u, v) in a.iter().zip(b.iter()) {
            // batch sizes 3 vs 2
            assert!((u * 3.0 - v * 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic(300, 0.7, 1);
        let dev = synthetic(100, 0.5, 2);
        let w = WeightVector::ones(data.len());
        let cfg = config(3, 32, 1e-2);
        for kind in [ModelKind::Standard, ModelKind::Gated] {
            let policy = (kind == ModelKind::Gated).then_some(GatePolicy::OneHot);
            let a = train(&spec(kind, 4), &data, &dev, &w, policy, &cfg).unwrap();
            let b = train(&spec(kind, 4), &data, &dev, &w, policy, &cfg).unwrap();
            let bits = |m: &Model| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.model), bits(&b.model));
            let strip = |h: &TrainHistory| {
                h.epochs.iter().map(|e| (e.loss.to_bits(), e.dev_accuracy.to_bits())).collect::<Vec<_>>()
            };
            assert_eq!(strip(&a.history), strip(&b.history));
        }
    }

    #[test]
    fn separable_toy_is_learned() {
        // y = 1 iff x0 + x1 > 0, with a margin around the boundary
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut k = 0u64;
        while labels.len() < 200 {
            k += 1;
            let a = ((k * 7919) % 1000) as f64 / 250.0 - 2.0;
            let b = ((k * 104_729) % 997) as f64 / 249.25 - 2.0;
            if (a + b).abs() < 0.2 {
                continue;
            }
            rows.extend([a, b]);
            labels.push(usize::from(a + b > 0.0));
        }
        let groups: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let x = Array2::from_shape_vec((200, 2), rows).unwrap();
        let data = Dataset::new(x, labels, groups, 2, 2).unwrap();
        assert!(perceptron_separates(&data), "toy data must be linearly separable");

        let out = train(
            &spec(ModelKind::Standard, 2),
            &data,
            &data,
            &WeightVector::ones(200),
            None,
            &config(100, 16, 1e-2),
        )
        .unwrap();
        let acc = evaluate(&out.model, &data, &Inference::default(), 0).unwrap().accuracy;
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    /// Separability oracle: the perceptron converges iff the data is separable.
    fn perceptron_separates(data: &Dataset) -> bool {
        let mut w = [0.0f64; 3];
        for _ in 0..10_000 {
            let mut mistakes = 0;
            for (row, &y) in data.features().outer_iter().zip(data.labels()) {
                let s = if y == 1 { 1.0 } else { -1.0 };
                let act = w[0] * row[0] + w[1] * row[1] + w[2];
                if s * act <= 0.0 {
                    w[0] += s * row[0];
                    w[1] += s * row[1];
                    w[2] += s;
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn reweighted_cells_contribute_equally_at_initialisation() {
        let data = synthetic(4000, 0.8, 5);
        let w = compute_weights(&data, &BalanceObjective::uniform(BalanceKind::Joint)).unwrap();
        let model = spec(ModelKind::Standard, 4).build(0).unwrap();
        let logits = model.logits(data.features().view(), None).unwrap();
        // per-cell decomposition of the weighted loss
        let mut cell_loss = [0.0f64; 4];
        for (i, row) in logits.outer_iter().enumerate() {
            let l = weighted_cross_entropy(&row.to_owned().insert_axis(Axis(0)), &[data.labels()[i]], &[w.as_slice()[i]])
                .unwrap();
            cell_loss[data.labels()[i] * 2 + data.groups()[i]] += l;
        }
        let mean = cell_loss.iter().sum::<f64>() / 4.0;
        for c in cell_loss {
            assert!((c - mean).abs() / mean < 0.05, "{cell_loss:?}");
        }
    }

    #[test]
    fn full_batch_gradient_descent_is_monotone_on_convex_problem() {
        use crate::model::{Dense, Mlp};
        let data = synthetic(200, 0.7, 8);
        let layer = Dense {
            weights: Array2::zeros((4, 2)),
            bias: ndarray::Array1::zeros(2),
        };
        let model = Model::Standard(Mlp::new(vec![layer], Activation::Tanh, false).unwrap());
        let mut cfg = config(60, 200, 0.5);
        cfg.optimizer = Optimizer::Sgd;
        let out =
            train_model(model, &data, &data, &WeightVector::ones(200), None, &cfg).unwrap();
        for pair in out.history.epochs.windows(2) {
            assert!(pair[1].loss <= pair[0].loss + 1e-9, "{:?}", pair);
        }
    }

    #[test]
    fn dev_selection_rules() {
        let rec = |epoch, acc, gap| EpochRecord {
            epoch,
            loss: 0.0,
            dev_accuracy: acc,
            dev_rms_gap: Some(gap),
            seconds: 0.0,
        };
        let history = TrainHistory {
            epochs: vec![rec(1, 0.70, 0.3), rec(2, 0.80, 0.25), rec(3, 0.79, 0.1), rec(4, 0.75, 0.01)],
        };
        let mut cfg = config(4, 1, 1.0);
        assert_eq!(select_epoch(&history, &cfg).unwrap(), 4);
        cfg.dev_selection = DevSelection::BestDevAccuracy;
        assert_eq!(select_epoch(&history, &cfg).unwrap(), 2);
        cfg.dev_selection = DevSelection::BestDevGapAtThreshold;
        assert_eq!(select_epoch(&history, &cfg).unwrap(), 3);
    }

    #[test]
    fn policy_must_match_model_kind() {
        let data = synthetic(50, 0.5, 1);
        let w = WeightVector::ones(50);
        let cfg = config(1, 10, 1e-2);
        assert!(train(&spec(ModelKind::Gated, 4), &data, &data, &w, None, &cfg).is_err());
        assert!(
            train(&spec(ModelKind::Standard, 4), &data, &data, &w, Some(GatePolicy::OneHot), &cfg)
                .is_err()
        );
        assert!(train(&spec(ModelKind::Standard, 4), &data, &data, &WeightVector::ones(3), None, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let data = synthetic(64, 0.5, 1);
        let mut cfg = config(5, 64, 1e308);
        cfg.optimizer = Optimizer::Sgd;
        let err = train(&spec(ModelKind::Standard, 4), &data, &data, &WeightVector::ones(64), None, &cfg)
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
