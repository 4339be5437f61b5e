//! Standard MLP classifier, the demographic-gated model, gating policies and
//! Bayesian prediction averaging.
//!
//! A gated model has one shared encoder `E`, one encoder `E_j` per group and a
//! classifier `C`. For an instance with gate coefficients `c` the prediction is
//! `C([E(x), Σ_j c_j E_j(x)])`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{seeded, streams};

/// Hidden-layer nonlinearity, shared by every model of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine layer `x ↦ x·W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Normal init with variance `1 / fan_in`, zero bias.
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("positive std");
        Self {
            weights: Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

/// Stack of dense layers. Hidden layers use `activation`; the last layer is
/// activated only for encoders (`activate_last`), classifiers emit logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    activate_last: bool,
}

/// Per-layer inputs and outputs kept for backpropagation.
pub(crate) struct MlpCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>, activation: Activation, activate_last: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(pair[0].outputs(), pair[1].inputs()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::shape(l.outputs(), l.bias.len()));
            }
        }
        Ok(Self {
            layers,
            activation,
            activate_last,
        })
    }

    /// Randomly initialised network with the given layer widths. A logit
    /// layer (`activate_last == false`) starts at zero.
    pub fn random(
        widths: &[usize],
        activation: Activation,
        activate_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        let mut layers: Vec<Dense> = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        if !activate_last {
            // logits start at zero: uniform predictions before the first update
            let last = layers.last_mut().expect("at least one layer");
            last.weights.fill(0.0);
        }
        Self::new(layers, activation, activate_last)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
            activation: self.activation,
            activate_last: self.activate_last,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    fn is_activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_last
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} feature columns", self.input_dim()),
                x.ncols(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.forward_unchecked(x, self.layers.len()))
    }

    /// Output of the first `depth` layers.
    fn forward_unchecked(&self, x: ArrayView2<f64>, depth: usize) -> Array2<f64> {
        let mut h = x.to_owned();
        for (i, layer) in self.layers[..depth].iter().enumerate() {
            h = layer.forward(h.view());
            if self.is_activated(i) {
                let act = self.activation;
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        h
    }

    /// Activations of the last hidden layer (input to the output layer).
    pub fn penultimate(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.forward_unchecked(x, self.layers.len() - 1))
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(h.view());
            if self.is_activated(i) {
                let act = self.activation;
                out.mapv_inplace(|v| act.apply(v));
            }
            inputs.push(h);
            outputs.push(out.clone());
            h = out;
        }
        (h, MlpCache { inputs, outputs })
    }

    /// Accumulates parameter gradients into `grads` given `d loss / d output`
    /// and returns `d loss / d input`.
    pub(crate) fn backward(
        &self,
        cache: &MlpCache,
        grad_output: Array2<f64>,
        grads: &mut Mlp,
    ) -> Array2<f64> {
        let mut delta = grad_output;
        for i in (0..self.layers.len()).rev() {
            if self.is_activated(i) {
                let act = self.activation;
                delta.zip_mut_with(&cache.outputs[i], |d, &o| *d *= act.derivative_from_output(o));
            }
            grads.layers[i].weights += &cache.inputs[i].t().dot(&delta);
            grads.layers[i].bias += &delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[i].weights.t());
        }
        delta
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
    }

    fn read_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = *src.next().expect("parameter count checked by caller");
            }
        }
    }
}

/// Shared encoder, one encoder per group, and a classifier over the
/// concatenated shared and gated representations.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedModel {
    shared: Mlp,
    group_encoders: Vec<Mlp>,
    classifier: Mlp,
}

pub(crate) struct GatedCache {
    shared: MlpCache,
    groups: Vec<Option<(Array2<f64>, MlpCache)>>,
    classifier: MlpCache,
}

impl GatedModel {
    pub fn new(shared: Mlp, group_encoders: Vec<Mlp>, classifier: Mlp) -> Result<Self> {
        if group_encoders.is_empty() {
            return Err(Error::InvalidArgument("gated model needs at least one group encoder".into()));
        }
        let width = group_encoders[0].output_dim();
        for e in &group_encoders {
            if e.output_dim() != width || e.input_dim() != shared.input_dim() {
                return Err(Error::shape(
                    format!("{} -> {width}", shared.input_dim()),
                    format!("{} -> {}", e.input_dim(), e.output_dim()),
                ));
            }
        }
        if classifier.input_dim() != shared.output_dim() + width {
            return Err(Error::shape(shared.output_dim() + width, classifier.input_dim()));
        }
        Ok(Self {
            shared,
            group_encoders,
            classifier,
        })
    }

    pub fn shared(&self) -> &Mlp {
        &self.shared
    }

    pub fn group_encoders(&self) -> &[Mlp] {
        &self.group_encoders
    }

    pub fn group_encoders_mut(&mut self) -> &mut [Mlp] {
        &mut self.group_encoders
    }

    pub fn classifier(&self) -> &Mlp {
        &self.classifier
    }

    pub fn group_count(&self) -> usize {
        self.group_encoders.len()
    }

    fn zeros_like(&self) -> Self {
        Self {
            shared: self.shared.zeros_like(),
            group_encoders: self.group_encoders.iter().map(Mlp::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
        }
    }

    fn check(&self, x: &ArrayView2<f64>, coeffs: &Array2<f64>) -> Result<()> {
        self.shared.check_input(x)?;
        if coeffs.nrows() != x.nrows() || coeffs.ncols() != self.group_count() {
            return Err(Error::shape(
                format!("{}x{} gate coefficients", x.nrows(), self.group_count()),
                format!("{}x{}", coeffs.nrows(), coeffs.ncols()),
            ));
        }
        for (i, row) in coeffs.outer_iter().enumerate() {
            check_simplex(row.as_slice().expect("standard layout"))
                .map_err(|e| Error::InvalidArgument(format!("gate row {i}: {e}")))?;
        }
        Ok(())
    }

    /// `h^g = Σ_j c_j E_j(x)`; zero coefficients are skipped so that 1-hot
    /// rows reproduce the selected encoder's output exactly.
    fn mix(coeffs: &Array2<f64>, encoded: &[Option<Array2<f64>>]) -> Array2<f64> {
        let width = encoded.iter().flatten().next().map_or(0, |e| e.ncols());
        let mut h = Array2::zeros((coeffs.nrows(), width));
        for (i, mut row) in h.outer_iter_mut().enumerate() {
            let mut started = false;
            for (j, e) in encoded.iter().enumerate() {
                let c = coeffs[[i, j]];
                if c == 0.0 {
                    continue;
                }
                let e = e.as_ref().expect("encoder evaluated for every non-zero column");
                if started {
                    row.zip_mut_with(&e.row(i), |h, &v| *h += c * v);
                } else {
                    row.zip_mut_with(&e.row(i), |h, &v| *h = c * v);
                    started = true;
                }
            }
        }
        h
    }

    pub fn forward(&self, x: ArrayView2<f64>, coeffs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(&x, coeffs)?;
        let hs = self.shared.forward_unchecked(x, self.shared.layers.len());
        let encoded: Vec<Option<Array2<f64>>> = self
            .group_encoders
            .iter()
            .enumerate()
            .map(|(j, e)| {
                coeffs
                    .column(j)
                    .iter()
                    .any(|&c| c != 0.0)
                    .then(|| e.forward_unchecked(x, e.layers.len()))
            })
            .collect();
        let hg = Self::mix(coeffs, &encoded);
        let joined = concatenate(Axis(1), &[hs.view(), hg.view()]).expect("same row count");
        Ok(self.classifier.forward_unchecked(joined.view(), self.classifier.layers.len()))
    }

    /// The gated representation `h^g` alone.
    pub fn gated_representation(
        &self,
        x: ArrayView2<f64>,
        coeffs: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check(&x, coeffs)?;
        let encoded: Vec<Option<Array2<f64>>> = self
            .group_encoders
            .iter()
            .map(|e| Some(e.forward_unchecked(x, e.layers.len())))
            .collect();
        Ok(Self::mix(coeffs, &encoded))
    }

    pub(crate) fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        coeffs: &Array2<f64>,
    ) -> Result<(Array2<f64>, GatedCache)> {
        self.check(&x, coeffs)?;
        let (hs, shared) = self.shared.forward_cached(x);
        let groups: Vec<Option<(Array2<f64>, MlpCache)>> = self
            .group_encoders
            .iter()
            .enumerate()
            .map(|(j, e)| coeffs.column(j).iter().any(|&c| c != 0.0).then(|| e.forward_cached(x)))
            .collect();
        let encoded: Vec<Option<Array2<f64>>> =
            groups.iter().map(|g| g.as_ref().map(|(h, _)| h.clone())).collect();
        let hg = Self::mix(coeffs, &encoded);
        let joined = concatenate(Axis(1), &[hs.view(), hg.view()]).expect("same row count");
        let (logits, classifier) = self.classifier.forward_cached(joined.view());
        Ok((
            logits,
            GatedCache {
                shared,
                groups,
                classifier,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        cache: &GatedCache,
        coeffs: &Array2<f64>,
        grad_logits: Array2<f64>,
        grads: &mut GatedModel,
    ) {
        let grad_joined = self.classifier.backward(&cache.classifier, grad_logits, &mut grads.classifier);
        let shared_width = self.shared.output_dim();
        let grad_hs = grad_joined.slice(s![.., ..shared_width]).to_owned();
        let grad_hg = grad_joined.slice(s![.., shared_width..]).to_owned();
        self.shared.backward(&cache.shared, grad_hs, &mut grads.shared);
        for (j, entry) in cache.groups.iter().enumerate() {
            let Some((_, enc_cache)) = entry else { continue };
            let mut grad_e = grad_hg.clone();
            for (mut row, &c) in grad_e.outer_iter_mut().zip(coeffs.column(j)) {
                row.mapv_inplace(|v| v * c);
            }
            self.group_encoders[j].backward(enc_cache, grad_e, &mut grads.group_encoders[j]);
        }
    }

    fn components(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(&self.shared)
            .chain(self.group_encoders.iter())
            .chain(std::iter::once(&self.classifier))
    }

    fn components_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        std::iter::once(&mut self.shared)
            .chain(self.group_encoders.iter_mut())
            .chain(std::iter::once(&mut self.classifier))
    }
}

/// Checks that `row` is a probability vector within `1e-12`.
pub fn check_simplex(row: &[f64]) -> Result<()> {
    if row.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return Err(Error::InvalidArgument(format!("{row:?} has negative or non-finite entries")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("{row:?} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Per-instance weights over groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCoefficients(Vec<f64>);

impl GateCoefficients {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_simplex(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn gate_onehot(group: usize, group_count: usize) -> Result<GateCoefficients> {
    if group >= group_count {
        return Err(Error::InvalidArgument(format!(
            "group {group} out of range for |G|={group_count}"
        )));
    }
    let mut v = vec![0.0; group_count];
    v[group] = 1.0;
    Ok(GateCoefficients(v))
}

pub fn gate_uniform(group_count: usize) -> Result<GateCoefficients> {
    if group_count == 0 {
        return Err(Error::InvalidArgument("|G| must be positive".into()));
    }
    Ok(GateCoefficients(vec![1.0 / group_count as f64; group_count]))
}

/// Soft gate around the gold group of a binary-group instance: gold group 0
/// gives `(1 − α, α)`, gold group 1 gives `(β, 1 − β)`. `α` and `β` are the
/// mass moved onto the other group's encoder.
pub fn gate_soft(gold_group: usize, alpha: f64, beta: f64) -> Result<GateCoefficients> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
        }
    }
    match gold_group {
        0 => Ok(GateCoefficients(vec![1.0 - alpha, alpha])),
        1 => Ok(GateCoefficients(vec![beta, 1.0 - beta])),
        g => Err(Error::Unsupported(format!("soft gating needs |G|=2, got group {g}"))),
    }
}

/// How gate coefficients are derived from each instance's gold group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum GatePolicy {
    OneHot,
    Uniform,
    Soft { alpha: f64, beta: f64 },
}

impl GatePolicy {
    pub fn coefficients(&self, group: usize, group_count: usize) -> Result<GateCoefficients> {
        match *self {
            GatePolicy::OneHot => gate_onehot(group, group_count),
            GatePolicy::Uniform => gate_uniform(group_count),
            GatePolicy::Soft { alpha, beta } => {
                if group_count != 2 {
                    return Err(Error::Unsupported("soft gating needs |G|=2".into()));
                }
                gate_soft(group, alpha, beta)
            }
        }
    }

    /// Coefficient matrix for a batch of gold groups.
    pub fn matrix(&self, groups: &[usize], group_count: usize) -> Result<Array2<f64>> {
        let mut m = Array2::zeros((groups.len(), group_count));
        for (mut row, &g) in m.outer_iter_mut().zip(groups) {
            let c = self.coefficients(g, group_count)?;
            row.assign(&Array1::from(c.0));
        }
        Ok(m)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Index of the largest entry per row; the lowest index wins ties.
pub fn argmax_rows(values: &Array2<f64>) -> Vec<usize> {
    values
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Standard,
    Gated,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Standard => "standard",
            ModelKind::Gated => "gated",
        })
    }
}

/// Architecture description; together with the seed it determines the
/// initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub label_count: usize,
    pub group_count: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    /// Standard: three affine layers `d → h → h → |Y|`. Gated: one-layer
    /// encoders `d → h` and a two-layer classifier `2h → h → |Y|`.
    pub fn build(&self, seed: u64) -> Result<Model> {
        if self.input_dim == 0 || self.hidden == 0 || self.label_count < 2 {
            return Err(Error::InvalidArgument(format!("invalid model spec {self:?}")));
        }
        let mut rng = seeded(seed, streams::INIT);
        let (d, h, y) = (self.input_dim, self.hidden, self.label_count);
        let act = self.activation;
        match self.kind {
            ModelKind::Standard => Ok(Model::Standard(Mlp::random(&[d, h, h, y], act, false, &mut rng)?)),
            ModelKind::Gated => {
                if self.group_count < 1 {
                    return Err(Error::InvalidArgument("gated model needs |G| ≥ 1".into()));
                }
                let shared = Mlp::random(&[d, h], act, true, &mut rng)?;
                let groups = (0..self.group_count)
                    .map(|_| Mlp::random(&[d, h], act, true, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let classifier = Mlp::random(&[2 * h, h, y], act, false, &mut rng)?;
                Ok(Model::Gated(GatedModel::new(shared, groups, classifier)?))
            }
        }
    }
}

/// Inference-time treatment of the group attribute for gated models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Inference {
    Gate(GatePolicy),
    /// `p(y|x) = Σ_g prior(g) p(y|x, g)`.
    Bayes { prior: Vec<f64> },
}

impl Default for Inference {
    fn default() -> Self {
        Inference::Gate(GatePolicy::OneHot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Standard(Mlp),
    Gated(GatedModel),
}

/// Rows per chunk when batching inference over the thread pool.
const INFERENCE_CHUNK: usize = 1024;

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Standard(_) => ModelKind::Standard,
            Model::Gated(_) => ModelKind::Gated,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Standard(m) => m.input_dim(),
            Model::Gated(m) => m.shared.input_dim(),
        }
    }

    pub fn label_count(&self) -> usize {
        match self {
            Model::Standard(m) => m.output_dim(),
            Model::Gated(m) => m.classifier.output_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Model::Standard(m) => Model::Standard(m.zeros_like()),
            Model::Gated(m) => Model::Gated(m.zeros_like()),
        }
    }

    fn components(&self) -> Vec<&Mlp> {
        match self {
            Model::Standard(m) => vec![m],
            Model::Gated(m) => m.components().collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.components().iter().map(|m| m.num_params()).sum()
    }

    /// All parameters in layer order (shared, group encoders, classifier).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in self.components() {
            m.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), params.len()));
        }
        let mut it = params.iter();
        match self {
            Model::Standard(m) => m.read_params(&mut it),
            Model::Gated(m) => m.components_mut().for_each(|c| c.read_params(&mut it)),
        }
        Ok(())
    }

    /// Logits for one batch; `coeffs` is required for gated models.
    pub fn logits(&self, x: ArrayView2<f64>, coeffs: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        match (self, coeffs) {
            (Model::Standard(m), _) => m.forward(x),
            (Model::Gated(m), Some(c)) => m.forward(x, c),
            (Model::Gated(_), None) => {
                Err(Error::InvalidArgument("gated model needs gate coefficients".into()))
            }
        }
    }

    /// Class probabilities for a batch under an inference mode.
    fn proba_batch(
        &self,
        x: ArrayView2<f64>,
        groups: &[usize],
        inference: &Inference,
    ) -> Result<Array2<f64>> {
        match self {
            Model::Standard(m) => Ok(softmax(&m.forward(x)?)),
            Model::Gated(m) => match inference {
                Inference::Gate(policy) => {
                    let coeffs = policy.matrix(groups, m.group_count())?;
                    Ok(softmax(&m.forward(x, &coeffs)?))
                }
                Inference::Bayes { prior } => bayes_average(m, x, prior),
            },
        }
    }

    /// Class probabilities, computed chunk-wise and assembled in row order.
    pub fn predict_proba(
        &self,
        x: ArrayView2<f64>,
        groups: &[usize],
        inference: &Inference,
        exec: Execution,
    ) -> Result<Array2<f64>> {
        if groups.len() != x.nrows() {
            return Err(Error::shape(x.nrows(), groups.len()));
        }
        let n = x.nrows();
        let chunks = n.div_ceil(INFERENCE_CHUNK).max(1);
        let parts = par::try_map_range(chunks, exec, |c| {
            let lo = c * INFERENCE_CHUNK;
            let hi = ((c + 1) * INFERENCE_CHUNK).min(n);
            self.proba_batch(x.slice(s![lo..hi, ..]), &groups[lo..hi], inference)
        })?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("matching widths"))
    }

    pub fn predict(
        &self,
        x: ArrayView2<f64>,
        groups: &[usize],
        inference: &Inference,
        exec: Execution,
    ) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x, groups, inference, exec)?))
    }

    pub fn save(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(header)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint_bytes(&self, header: &CheckpointHeader) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(header)?;
        let params = self.params();
        let mut out = Vec::with_capacity(16 + json.len() + params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<(Model, CheckpointHeader)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], name: &str) -> Result<(Model, CheckpointHeader)> {
        if !bytes.starts_with(CHECKPOINT_MAGIC) || bytes.len() < 16 {
            return Err(Error::parse(name, "offset 0", "not a model checkpoint"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::parse(name, "offset 16", "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)
            .map_err(|e| Error::parse(name, "header", e))?;
        let mut model = header.spec.build(header.seed)?;
        let raw = &bytes[16 + len..];
        if raw.len() != model.num_params() * 8 {
            return Err(Error::parse(
                name,
                format!("offset {}", 16 + len),
                format!("expected {} parameters, found {} bytes", model.num_params(), raw.len()),
            ));
        }
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.set_params(&params)?;
        Ok((model, header))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FGMODEL1";

/// Self-describing checkpoint header, stored as JSON ahead of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub seed: u64,
    pub layer_widths: Vec<Vec<usize>>,
}

impl CheckpointHeader {
    pub fn new(spec: &ModelSpec, seed: u64, model: &Model) -> Self {
        Self {
            spec: spec.clone(),
            seed,
            layer_widths: model.components().iter().map(|m| m.widths()).collect(),
        }
    }
}

/// Mixes the softmax outputs of each 1-hot gated pass by `prior`.
pub fn bayes_average(model: &GatedModel, x: ArrayView2<f64>, prior: &[f64]) -> Result<Array2<f64>> {
    if prior.len() != model.group_count() {
        return Err(Error::shape(model.group_count(), prior.len()));
    }
    check_simplex(prior).map_err(|e| Error::InvalidArgument(format!("prior: {e}")))?;
    let mut mixed: Option<Array2<f64>> = None;
    for (g, &p) in prior.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let coeffs = GatePolicy::OneHot.matrix(&vec![g; x.nrows()], model.group_count())?;
        let probs = softmax(&model.forward(x, &coeffs)?);
        mixed = Some(match mixed {
            None => probs.mapv(|v| p * v),
            Some(mut acc) => {
                acc.zip_mut_with(&probs, |a, &v| *a += p * v);
                acc
            }
        });
    }
    Ok(mixed.expect("a simplex vector has a positive entry"))
}
