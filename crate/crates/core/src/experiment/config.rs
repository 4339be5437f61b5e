//! Declarative experiment description, read from TOML and validated before
//! any work starts.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{skew_target, BalanceKind, BalanceObjective, WeightConvention};
use crate::data::SplitFractions;
use crate::error::{Error, Result};
use crate::inlp::{BaseKind, InlpConfig, SolverConfig};
use crate::model::{Activation, GatePolicy, Inference, ModelKind, ModelSpec};
use crate::train::{DevSelection, Optimizer, TrainConfig};
use crate::tuning::{SelectionMode, SelectionRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in reports; derived from the method when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub balance: BalanceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gating: Option<GatingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inlp: Option<InlpSection>,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Directory that relative data paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Fresh synthetic splits; dev and test default to a balanced skew.
    Synthetic {
        d: usize,
        class_separation: f64,
        group_shift: f64,
        #[serde(default = "one")]
        noise_std: f64,
        train_size: usize,
        dev_size: usize,
        test_size: usize,
        train_skew: f64,
        #[serde(default = "half")]
        eval_skew: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Three pre-split files.
    Files { train: PathBuf, dev: PathBuf, test: PathBuf },
    /// One file, split by fractions.
    Split {
        path: PathBuf,
        fractions: SplitFractions,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMethod {
    #[default]
    None,
    Rw,
    Ds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    #[serde(default)]
    pub method: BalanceMethod,
    #[serde(default = "joint")]
    pub kind: BalanceKind,
    /// Binary skew to balance towards instead of uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_skew: Option<f64>,
    #[serde(default)]
    pub convention: WeightConvention,
}

fn joint() -> BalanceKind {
    BalanceKind::Joint
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            method: BalanceMethod::None,
            kind: joint(),
            target_skew: None,
            convention: WeightConvention::default(),
        }
    }
}

impl BalanceConfig {
    pub fn objective(&self, label_count: usize, group_count: usize) -> Result<BalanceObjective> {
        Ok(match self.target_skew {
            Some(s) => BalanceObjective::with_target(self.kind, skew_target(s, label_count, group_count)?),
            None => BalanceObjective::uniform(self.kind),
        })
    }
}

/// Inference-time gating of a gated model (training always uses the gold
/// group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase", deny_unknown_fields)]
pub enum GatingConfig {
    Onehot,
    Uniform,
    Soft {
        alpha: f64,
        beta: f64,
    },
    /// Averages the per-group predictions; uniform prior by default.
    Bayes {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior: Option<Vec<f64>>,
    },
}

impl GatingConfig {
    pub fn inference(&self, group_count: usize) -> Inference {
        match self {
            GatingConfig::Onehot => Inference::Gate(GatePolicy::OneHot),
            GatingConfig::Uniform => Inference::Gate(GatePolicy::Uniform),
            GatingConfig::Soft { alpha, beta } => Inference::Gate(GatePolicy::Soft {
                alpha: *alpha,
                beta: *beta,
            }),
            GatingConfig::Bayes { prior } => Inference::Bayes {
                prior: prior
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / group_count as f64; group_count]),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlpSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub iterations: usize,
    #[serde(default = "default_margin")]
    pub stop_margin: f64,
    #[serde(default = "default_regularization")]
    pub regularization: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Choose how many directions to keep on dev for every run.
    #[serde(default = "yes")]
    pub select_iterations: bool,
}

fn yes() -> bool {
    true
}

fn default_margin() -> f64 {
    0.02
}

fn default_regularization() -> f64 {
    SolverConfig::default().regularization
}

fn default_max_iter() -> usize {
    SolverConfig::default().max_iter
}

fn default_tolerance() -> f64 {
    SolverConfig::default().tolerance
}

impl InlpSection {
    pub fn inlp_config(&self) -> InlpConfig {
        InlpConfig {
            iterations: self.iterations,
            stop_margin: self.stop_margin,
            solver: SolverConfig {
                regularization: self.regularization,
                max_iter: self.max_iter,
                tolerance: self.tolerance,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Defaults to best dev accuracy for plain runs and to the lowest dev
    /// GAP within the accuracy threshold for debiased ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_selection: Option<DevSelection>,
    #[serde(default = "default_margin")]
    pub threshold_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: default_seeds() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// Grid over training settings; every listed axis must be non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Defaults to the run's dev-selection rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<SelectionRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub rule: SelectionRule,
}

fn default_resolution() -> usize {
    21
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
            rule: SelectionRule::default(),
        }
    }
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let location = e
            .span()
            .map(|s| {
                let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                format!("line {line}")
            })
            .unwrap_or_else(|| "document".into());
        Error::parse("experiment config", location, e.message())
    })?;
    config.base_dir = base_dir.to_path_buf();
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base).map_err(|e| match e {
        Error::Parse { location, message, .. } => Error::parse(path.display(), location, message),
        other => other,
    })
}

fn check(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn open_unit(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataConfig::Synthetic {
                d,
                class_separation,
                group_shift,
                noise_std,
                train_size,
                dev_size,
                test_size,
                train_skew,
                eval_skew,
                ..
            } => {
                check(*d >= 2, "data.d", "must be at least 2")?;
                check(positive(*class_separation), "data.class_separation", "must be positive")?;
                check(
                    *group_shift >= 0.0 && group_shift.is_finite(),
                    "data.group_shift",
                    "must be non-negative",
                )?;
                check(positive(*noise_std), "data.noise_std", "must be positive")?;
                check(*train_size > 0, "data.train_size", "must be positive")?;
                check(*dev_size > 0, "data.dev_size", "must be positive")?;
                check(*test_size > 0, "data.test_size", "must be positive")?;
                check(open_unit(*train_skew), "data.train_skew", "must lie strictly between 0 and 1")?;
                check(open_unit(*eval_skew), "data.eval_skew", "must lie strictly between 0 and 1")?;
            }
            DataConfig::Files { .. } => {}
            DataConfig::Split { fractions, .. } => {
                let SplitFractions { train, dev, test } = *fractions;
                let ok = [train, dev, test].iter().all(|f| positive(*f)) && ((train + dev + test) - 1.0).abs() < 1e-9;
                check(ok, "data.fractions", "must be positive and sum to 1")?;
            }
        }
        check(self.model.hidden > 0, "model.hidden", "must be positive")?;

        if let Some(s) = self.balance.target_skew {
            check(open_unit(s), "balance.target_skew", "must lie strictly between 0 and 1")?;
            check(
                self.balance.method != BalanceMethod::None,
                "balance.target_skew",
                "needs balance.method = \"rw\" or \"ds\"",
            )?;
        }

        if let Some(g) = &self.gating {
            check(self.model.kind == ModelKind::Gated, "gating", "needs model.kind = \"gated\"")?;
            match g {
                GatingConfig::Soft { alpha, beta } => {
                    check((0.0..=1.0).contains(alpha), "gating.alpha", "must lie in [0, 1]")?;
                    check((0.0..=1.0).contains(beta), "gating.beta", "must lie in [0, 1]")?;
                }
                GatingConfig::Bayes { prior: Some(p) } => {
                    let ok = !p.is_empty()
                        && p.iter().all(|v| *v >= 0.0 && v.is_finite())
                        && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
                    check(ok, "gating.prior", "must be a probability vector")?;
                }
                _ => {}
            }
        }

        if let Some(i) = self.inlp.as_ref().filter(|i| i.enabled) {
            check(self.model.kind == ModelKind::Standard, "inlp.enabled", "needs model.kind = \"standard\"")?;
            check(i.iterations >= 1, "inlp.iterations", "must be at least 1")?;
            check(i.iterations <= self.model.hidden, "inlp.iterations", "cannot exceed model.hidden")?;
            check(i.stop_margin >= 0.0, "inlp.stop_margin", "must be non-negative")?;
            check(i.regularization >= 0.0, "inlp.regularization", "must be non-negative")?;
            check(i.max_iter > 0, "inlp.max_iter", "must be positive")?;
            check(positive(i.tolerance), "inlp.tolerance", "must be positive")?;
        }

        let t = &self.train;
        check(t.epochs > 0, "train.epochs", "must be positive")?;
        check(t.batch_size > 0, "train.batch_size", "must be positive")?;
        check(positive(t.learning_rate), "train.learning_rate", "must be positive")?;
        check(
            t.threshold_offset >= 0.0 && t.threshold_offset.is_finite(),
            "train.threshold_offset",
            "must be non-negative",
        )?;
        if let Optimizer::Adam { beta1, beta2, epsilon } = t.optimizer {
            check((0.0..1.0).contains(&beta1), "train.optimizer.beta1", "must lie in [0, 1)")?;
            check((0.0..1.0).contains(&beta2), "train.optimizer.beta2", "must lie in [0, 1)")?;
            check(positive(epsilon), "train.optimizer.epsilon", "must be positive")?;
        }

        check(!self.eval.seeds.is_empty(), "eval.seeds", "must list at least one seed")?;
        let mut seen = HashSet::new();
        check(self.eval.seeds.iter().all(|s| seen.insert(*s)), "eval.seeds", "must not repeat")?;

        if let Some(s) = &self.search {
            let axes = [
                ("search.learning_rate", s.learning_rate.as_ref().map(|v| v.len())),
                ("search.batch_size", s.batch_size.as_ref().map(|v| v.len())),
                ("search.epochs", s.epochs.as_ref().map(|v| v.len())),
                ("search.hidden", s.hidden.as_ref().map(|v| v.len())),
            ];
            check(axes.iter().any(|(_, l)| l.is_some()), "search", "needs at least one axis")?;
            for (field, len) in axes {
                check(len != Some(0), field, "must not be empty")?;
            }
            if let Some(v) = &s.learning_rate {
                check(v.iter().all(|x| positive(*x)), "search.learning_rate", "must be positive")?;
            }
            for (field, v) in [("search.batch_size", &s.batch_size), ("search.epochs", &s.epochs), ("search.hidden", &s.hidden)] {
                if let Some(v) = v {
                    check(v.iter().all(|x| *x > 0), field, "must be positive")?;
                }
            }
            if let Some(r) = &s.rule {
                check(r.validate().is_ok(), "search.rule.threshold_offset", "must be non-negative")?;
            }
        }

        if let Some(s) = &self.sweep {
            check(self.model.kind == ModelKind::Gated, "sweep", "needs model.kind = \"gated\"")?;
            check(s.resolution >= 2, "sweep.resolution", "must be at least 2")?;
            check(s.rule.validate().is_ok(), "sweep.rule.threshold_offset", "must be non-negative")?;
        }
        Ok(())
    }

    pub fn inlp_enabled(&self) -> bool {
        self.inlp.as_ref().is_some_and(|i| i.enabled)
    }

    /// Whether the run applies any debiasing during training.
    pub fn is_debiased(&self) -> bool {
        self.balance.method != BalanceMethod::None || self.inlp_enabled()
    }

    /// Plain standard model: the reference for relative training time.
    pub fn is_baseline(&self) -> bool {
        self.model.kind == ModelKind::Standard && !self.is_debiased()
    }

    pub fn dev_selection(&self) -> DevSelection {
        self.train.dev_selection.unwrap_or(if self.is_debiased() {
            DevSelection::BestDevGapAtThreshold
        } else {
            DevSelection::BestDevAccuracy
        })
    }

    pub fn selection_rule(&self) -> SelectionRule {
        let mode = match self.dev_selection() {
            DevSelection::BestDevGapAtThreshold => SelectionMode::MinGapAtThreshold,
            _ => SelectionMode::MaxAccuracy,
        };
        SelectionRule {
            mode,
            threshold_offset: self.train.threshold_offset,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            seed,
            dev_selection: self.dev_selection(),
            threshold_offset: self.train.threshold_offset,
        }
    }

    pub fn model_spec(&self, input_dim: usize, label_count: usize, group_count: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            input_dim,
            hidden: self.model.hidden,
            label_count,
            group_count,
            activation: self.model.activation,
        }
    }

    pub fn inference(&self, group_count: usize) -> Inference {
        self.gating
            .as_ref()
            .map(|g| g.inference(group_count))
            .unwrap_or_default()
    }

    pub fn base_kind(&self) -> BaseKind {
        match self.balance.method {
            BalanceMethod::None => BaseKind::Standard,
            BalanceMethod::Rw => BaseKind::Rw,
            BalanceMethod::Ds => BaseKind::Ds,
        }
    }

    /// Report label such as `Standard`, `Gate+RW`, `INLP+DS` or `RW(0.4)`.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let balance = match self.balance.method {
            BalanceMethod::None => None,
            BalanceMethod::Rw => Some("RW"),
            BalanceMethod::Ds => Some("DS"),
        };
        let mut parts: Vec<String> = Vec::new();
        if self.inlp_enabled() {
            parts.push("INLP".into());
        } else if self.model.kind == ModelKind::Gated {
            parts.push("Gate".into());
        }
        if let Some(b) = balance {
            let b = match self.balance.target_skew {
                Some(s) => format!("{b}({s})"),
                None => b.to_string(),
            };
            parts.push(b);
        }
        match &self.gating {
            Some(GatingConfig::Uniform) => parts.push("Soft".into()),
            Some(GatingConfig::Soft { alpha, beta }) => parts.push(format!("Soft({alpha},{beta})")),
            Some(GatingConfig::Bayes { .. }) => parts.push("Bayes".into()),
            _ => {}
        }
        if parts.is_empty() {
            "Standard".into()
        } else {
            parts.join("+")
        }
    }

    /// Digest of everything that affects a single run's results (the seed
    /// list and output location are excluded).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.eval = EvalConfig::default();
        canonical.output = OutputConfig::default();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// `<root>/<hash>-seed<k>`.
    pub fn run_dir(&self, root: &Path, seed: u64) -> PathBuf {
        root.join(format!("{}-seed{seed}", self.hash()))
    }
}
