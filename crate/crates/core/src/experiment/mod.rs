//! Config-driven experiment runs: data preparation, balancing, training or
//! INLP, evaluation, and the on-disk layout shared by the command-line tool.
//!
//! Each `(config, seed)` pair owns the directory `<root>/<hash>-seed<k>`.
//! Everything written there is a function of the pair alone, apart from
//! `timing.json`. `run.json` is written last, so its presence marks a
//! completed run.

mod config;
mod report;

pub use config::*;
pub use report::*;

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::balance::{compute_weights_with, downsample_indices, WeightVector};
use crate::data::{
    empirical_joint, generate_synthetic, load_dataset, save_dataset, split, DataFormat, Dataset, Splits,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::inlp::{inlp_pipeline, LogisticRegression, PipelineConfig, ProjectionStack};
use crate::metrics::{EvalRecord, FairnessReport};
use crate::model::{CheckpointHeader, GatePolicy, Inference, Model, ModelKind};
use crate::par::Execution;
use crate::train::{train, TrainHistory};
use crate::tuning::{alpha_beta_sweep, grid_search, select_coefficients, GridResult, GridRow, SearchSpace, SweepCell};

pub const RUN_FILE: &str = "run.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const DEV_REPORT_FILE: &str = "report_dev.json";
pub const TEST_REPORT_FILE: &str = "report_test.json";
pub const WEIGHTS_FILE: &str = "weights.txt";
pub const PROJECTION_FILE: &str = "projection.bin";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const SEARCH_FILE: &str = "search.jsonl";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const SWEEP_FILE: &str = "sweep.json";

/// Independent child seed (splitmix64 finaliser over `seed` and `stream`).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display(), format!("line {}", e.line()), e))
}

/// Train, dev and test sets described by the config's data section.
pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    match &config.data {
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
            seed,
        } => {
            let make = |n: usize, skew: f64, part: u64| {
                generate_synthetic(&SyntheticConfig {
                    n,
                    d: *d,
                    skew,
                    class_separation: *class_separation,
                    group_shift: *group_shift,
                    noise_std: *noise_std,
                    seed: derive_seed(*seed, part),
                    label_count: 2,
                    group_count: 2,
                })
            };
            Ok(Splits {
                train: make(*train_size, *train_skew, 0)?,
                dev: make(*dev_size, *eval_skew, 1)?,
                test: make(*test_size, *eval_skew, 2)?,
            })
        }
        DataConfig::Files { train, dev, test } => Ok(Splits {
            train: load_dataset(&config.resolve(train))?,
            dev: load_dataset(&config.resolve(dev))?,
            test: load_dataset(&config.resolve(test))?,
        }),
        DataConfig::Split { path, fractions, seed } => split(&load_dataset(&config.resolve(path))?, *fractions, *seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub y: usize,
    pub g: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub path: PathBuf,
    pub size: usize,
    pub cells: Vec<CellCount>,
}

pub fn cell_counts(dataset: &Dataset) -> Vec<CellCount> {
    let joint = empirical_joint(dataset);
    let mut out = Vec::new();
    for y in 0..dataset.label_count() {
        for g in 0..dataset.group_count() {
            out.push(CellCount { y, g, count: joint.count(y, g) });
        }
    }
    out
}

/// Writes `train`, `dev` and `test` files into `dir`.
pub fn generate_files(config: &ExperimentConfig, dir: &Path, format: DataFormat) -> Result<Vec<SplitSummary>> {
    let splits = load_splits(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = match format {
        DataFormat::Text => "txt",
        DataFormat::Binary => "bin",
    };
    [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)]
        .into_iter()
        .map(|(name, ds)| {
            let path = dir.join(format!("{name}.{ext}"));
            save_dataset(ds, &path, format)?;
            Ok(SplitSummary {
                split: name.into(),
                path,
                size: ds.len(),
                cells: cell_counts(ds),
            })
        })
        .collect()
}

/// Debiased encoder output of an INLP run.
#[derive(Debug, Clone)]
pub struct InlpArtifacts {
    pub stack: ProjectionStack,
    pub classifier: LogisticRegression,
    pub directions_used: usize,
}

/// In-memory result of one training run.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: Model,
    pub header: CheckpointHeader,
    pub history: TrainHistory,
    pub selected_epoch: usize,
    pub train_size: usize,
    pub weights: Option<WeightVector>,
    pub inlp: Option<InlpArtifacts>,
    pub dev_predictions: Vec<usize>,
    pub test_predictions: Vec<usize>,
}

/// Trains once under `config` (no grid search).
pub fn fit(config: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<Fitted> {
    let train_set = &splits.train;
    let (y, g) = (train_set.label_count(), train_set.group_count());
    let spec = config.model_spec(train_set.dim(), y, g);
    let train_config = config.train_config(seed);
    let objective = config.balance.objective(y, g)?;

    if let Some(section) = config.inlp.as_ref().filter(|i| i.enabled) {
        let pipeline = PipelineConfig {
            base: config.base_kind(),
            objective,
            convention: config.balance.convention,
            model: spec.clone(),
            train: train_config,
            inlp: section.inlp_config(),
            select_iterations: section.select_iterations,
            seed,
        };
        let out = inlp_pipeline(splits, &pipeline)?;
        let train_size = match config.balance.method {
            BalanceMethod::Ds => downsample_indices(train_set, &pipeline.objective, seed)?.len(),
            _ => train_set.len(),
        };
        return Ok(Fitted {
            header: CheckpointHeader::new(&spec, seed, &out.base.model),
            model: out.base.model,
            history: out.base.history,
            selected_epoch: out.base.selected_epoch,
            train_size,
            weights: None,
            inlp: Some(InlpArtifacts {
                stack: out.stack,
                classifier: out.classifier,
                directions_used: out.directions_used,
            }),
            dev_predictions: out.dev_predictions,
            test_predictions: out.test_predictions,
        });
    }

    let (fit_set, weights): (Cow<Dataset>, WeightVector) = match config.balance.method {
        BalanceMethod::None => (Cow::Borrowed(train_set), WeightVector::ones(train_set.len())),
        BalanceMethod::Rw => (
            Cow::Borrowed(train_set),
            compute_weights_with(train_set, &objective, config.balance.convention)?,
        ),
        BalanceMethod::Ds => {
            let ds = train_set.subset(&downsample_indices(train_set, &objective, seed)?)?;
            let n = ds.len();
            (Cow::Owned(ds), WeightVector::ones(n))
        }
    };
    let policy = (spec.kind == ModelKind::Gated).then_some(GatePolicy::OneHot);
    let outcome = train(&spec, &fit_set, &splits.dev, &weights, policy, &train_config)?;
    let inference = config.inference(g);
    let predict =
        |d: &Dataset| outcome.model.predict(d.features().view(), d.groups(), &inference, Execution::Parallel);
    let (dev_predictions, test_predictions) = (predict(&splits.dev)?, predict(&splits.test)?);
    Ok(Fitted {
        header: CheckpointHeader::new(&spec, seed, &outcome.model),
        model: outcome.model,
        history: outcome.history,
        selected_epoch: outcome.selected_epoch,
        train_size: fit_set.len(),
        weights: (config.balance.method == BalanceMethod::Rw).then_some(weights),
        inlp: None,
        dev_predictions,
        test_predictions,
    })
}

fn report_for(predictions: &[usize], data: &Dataset, seed: u64) -> Result<FairnessReport> {
    FairnessReport::from_record(&EvalRecord::for_dataset(predictions.to_vec(), data)?, seed)
}

fn search_space(search: &SearchConfig) -> Result<SearchSpace> {
    let mut space = SearchSpace::new();
    let as_f64 = |v: &Vec<usize>| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    if let Some(v) = &search.learning_rate {
        space = space.axis("learning_rate", v.clone())?;
    }
    if let Some(v) = &search.batch_size {
        space = space.axis("batch_size", as_f64(v))?;
    }
    if let Some(v) = &search.epochs {
        space = space.axis("epochs", as_f64(v))?;
    }
    if let Some(v) = &search.hidden {
        space = space.axis("hidden", as_f64(v))?;
    }
    Ok(space)
}

/// Like [`fit`], but when the config has a search section every grid point
/// is trained (concurrently, each with its own derived seed) and the one
/// picked by the selection rule on dev is returned with the full table.
pub fn fit_with_search(config: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<(Fitted, Option<GridResult>)> {
    let Some(search) = &config.search else {
        return Ok((fit(config, splits, seed)?, None));
    };
    let space = search_space(search)?;
    let rule = search.rule.unwrap_or_else(|| config.selection_rule());
    let slots: Vec<Mutex<Option<Fitted>>> = (0..space.len()).map(|_| Mutex::new(None)).collect();
    let result = grid_search(
        &space,
        |point| {
            let mut variant = config.clone();
            if let Some(v) = point.get("learning_rate") {
                variant.train.learning_rate = v;
            }
            if let Some(v) = point.get("batch_size") {
                variant.train.batch_size = v as usize;
            }
            if let Some(v) = point.get("epochs") {
                variant.train.epochs = v as usize;
            }
            if let Some(v) = point.get("hidden") {
                variant.model.hidden = v as usize;
            }
            let fitted = fit(&variant, splits, derive_seed(seed, point.index as u64))?;
            let dev = report_for(&fitted.dev_predictions, &splits.dev, seed)?;
            *slots[point.index].lock().expect("slot lock") = Some(fitted);
            Ok((dev.accuracy, dev.rms_gap))
        },
        &rule,
        Execution::Parallel,
    )?;
    let fitted = slots
        .into_iter()
        .nth(result.selected)
        .and_then(|m| m.into_inner().expect("slot lock"))
        .expect("every grid point was fitted");
    Ok((fitted, Some(result)))
}

/// Summary written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    /// Seeds the config asks for; used to detect missing runs.
    pub expected_seeds: Vec<u64>,
    /// Plain standard model, the reference for relative time.
    pub baseline: bool,
    pub model_kind: ModelKind,
    pub inference: Inference,
    pub train_size: usize,
    pub selected_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions_used: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_selection: Option<GridRow>,
    pub dev: FairnessReport,
    pub test: FairnessReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl ClassifierFile {
    fn from_model(c: &LogisticRegression) -> Self {
        Self {
            weights: c.weights().outer_iter().map(|r| r.to_vec()).collect(),
            bias: c.bias().to_vec(),
        }
    }

    fn into_model(self) -> Result<LogisticRegression> {
        let rows = self.weights.len();
        let cols = self.weights.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.weights.into_iter().flatten().collect();
        let w = Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        LogisticRegression::from_parts(w, Array1::from(self.bias))
    }
}

/// Trains `(config, seed)` and writes every artifact into its run directory
/// under `root`.
pub fn run(config: &ExperimentConfig, seed: u64, root: &Path) -> Result<RunRecord> {
    let splits = load_splits(config)?;
    run_on(config, &splits, seed, root)
}

/// [`run`] with pre-loaded data.
pub fn run_on(config: &ExperimentConfig, splits: &Splits, seed: u64, root: &Path) -> Result<RunRecord> {
    let dir = config.run_dir(root, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let run_file = dir.join(RUN_FILE);
    if run_file.exists() {
        fs::remove_file(&run_file).map_err(|e| Error::io(&run_file, e))?;
    }
    let started = Instant::now();
    let (fitted, search) = fit_with_search(config, splits, seed)?;
    let seconds = started.elapsed().as_secs_f64();
    log::info!("{} seed {seed}: trained in {seconds:.2}s", config.label());

    let dev = report_for(&fitted.dev_predictions, &splits.dev, seed)?;
    let test = report_for(&fitted.test_predictions, &splits.test, seed)?;

    write_file(&dir.join(CONFIG_FILE), config.to_toml()?)?;
    fitted.model.save(&dir.join(CHECKPOINT_FILE), &fitted.header)?;
    fitted.history.write_jsonl(&dir.join(HISTORY_FILE))?;
    write_json(&dir.join(DEV_REPORT_FILE), &dev)?;
    write_json(&dir.join(TEST_REPORT_FILE), &test)?;
    if let Some(w) = &fitted.weights {
        w.write(&dir.join(WEIGHTS_FILE))?;
    }
    if let Some(i) = &fitted.inlp {
        i.stack.save(&dir.join(PROJECTION_FILE))?;
        write_json(&dir.join(CLASSIFIER_FILE), &ClassifierFile::from_model(&i.classifier))?;
    }
    if let Some(s) = &search {
        write_file(&dir.join(SEARCH_FILE), s.to_jsonl()?)?;
    }
    write_json(&dir.join(TIMING_FILE), &RunTiming { seconds })?;

    let record = RunRecord {
        label: config.label(),
        config_hash: config.hash(),
        seed,
        expected_seeds: config.eval.seeds.clone(),
        baseline: config.is_baseline(),
        model_kind: config.model.kind,
        inference: config.inference(splits.train.group_count()),
        train_size: fitted.train_size,
        selected_epoch: fitted.selected_epoch,
        directions_used: fitted.inlp.as_ref().map(|i| i.directions_used),
        search_selection: search.map(|s| s.selected_row().clone()),
        dev,
        test,
    };
    let tmp = dir.join(format!("{RUN_FILE}.tmp"));
    write_json(&tmp, &record)?;
    fs::rename(&tmp, &run_file).map_err(|e| Error::io(&run_file, e))?;
    Ok(record)
}

/// Completed run: its record and wall-clock time.
pub fn load_run(dir: &Path) -> Result<(RunRecord, RunTiming)> {
    let record = read_json(&dir.join(RUN_FILE))?;
    let timing = read_json(&dir.join(TIMING_FILE))?;
    Ok((record, timing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dev: FairnessReport,
    pub test: FairnessReport,
}

/// Re-evaluates a stored run from its checkpoint (and projection, for INLP)
/// under the config's inference setting.
pub fn evaluate_run(config: &ExperimentConfig, dir: &Path, seed: u64) -> Result<Evaluation> {
    let splits = load_splits(config)?;
    let (model, _) = Model::load(&dir.join(CHECKPOINT_FILE))?;
    let predict = |d: &Dataset| -> Result<Vec<usize>> {
        if config.inlp_enabled() {
            let Model::Standard(encoder) = &model else {
                return Err(Error::Unsupported("INLP runs store a standard encoder".into()));
            };
            let stack = ProjectionStack::load(&dir.join(PROJECTION_FILE))?;
            let classifier = read_json::<ClassifierFile>(&dir.join(CLASSIFIER_FILE))?.into_model()?;
            let used = stack.truncated(
                read_json::<RunRecord>(&dir.join(RUN_FILE))?
                    .directions_used
                    .unwrap_or(stack.directions().len()),
            )?;
            let rep = used.apply(encoder.penultimate(d.features().view())?.view())?;
            Ok(classifier.predict(rep.view()))
        } else {
            let inference = config.inference(d.group_count());
            model.predict(d.features().view(), d.groups(), &inference, Execution::Parallel)
        }
    };
    Ok(Evaluation {
        dev: report_for(&predict(&splits.dev)?, &splits.dev, seed)?,
        test: report_for(&predict(&splits.test)?, &splits.test, seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub resolution: usize,
    pub alpha: f64,
    pub beta: f64,
    pub dev: SweepCell,
    pub test: FairnessReport,
}

/// Coefficient sweep on dev over a stored gated checkpoint, then a single
/// test evaluation at the selected `(α, β)`. Writes `sweep.csv` and
/// `sweep.json` next to the checkpoint.
pub fn run_sweep(config: &ExperimentConfig, dir: &Path, seed: u64) -> Result<SweepOutcome> {
    let splits = load_splits(config)?;
    let (model, header) = Model::load(&dir.join(CHECKPOINT_FILE))?;
    let expected = config.model_spec(splits.train.dim(), splits.train.label_count(), splits.train.group_count());
    let matches = header.spec.kind == expected.kind
        && header.spec.input_dim == expected.input_dim
        && header.spec.label_count == expected.label_count
        && header.spec.group_count == expected.group_count
        && header.spec.activation == expected.activation;
    if !matches || model.kind() != ModelKind::Gated {
        return Err(Error::InvalidArgument(format!(
            "checkpoint in {} holds a {} model that does not match the config",
            dir.display(),
            header.spec.kind
        )));
    }
    let sweep = config.sweep.clone().unwrap_or_default();
    let matrix = alpha_beta_sweep(&model, &splits.dev, sweep.resolution, Execution::Parallel)?;
    let (alpha, beta) = select_coefficients(&matrix, &sweep.rule)?;
    let dev = *matrix
        .cells
        .iter()
        .find(|c| c.alpha == alpha && c.beta == beta)
        .expect("selected cell is in the matrix");
    let preds = model.predict(
        splits.test.features().view(),
        splits.test.groups(),
        &Inference::Gate(GatePolicy::Soft { alpha, beta }),
        Execution::Parallel,
    )?;
    let outcome = SweepOutcome {
        resolution: sweep.resolution,
        alpha,
        beta,
        dev,
        test: report_for(&preds, &splits.test, seed)?,
    };
    matrix.write_csv(&dir.join(SWEEP_CSV_FILE))?;
    write_json(&dir.join(SWEEP_FILE), &outcome)?;
    Ok(outcome)
}
