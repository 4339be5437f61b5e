//! Balanced training: per-instance loss weights and down-sampling under the
//! `p(G)`, `p(G|Y)` and `p(G,Y)` objectives, with optional non-uniform targets.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{empirical_joint, stereotype_cells, Dataset, JointDistribution};
use crate::error::{Error, Result};
use crate::rng::{seeded, streams};

/// Which distribution balancing makes uniform (or matches to a target).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BalanceKind {
    /// Marginal `p(G)`.
    #[serde(rename = "pg")]
    Group,
    /// Conditional `p(G|Y)` for every class.
    #[serde(rename = "pg_given_y")]
    GroupGivenLabel,
    /// Joint `p(G,Y)`.
    #[serde(rename = "pgy")]
    Joint,
}

impl fmt::Display for BalanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BalanceKind::Group => "pg",
            BalanceKind::GroupGivenLabel => "pg_given_y",
            BalanceKind::Joint => "pgy",
        })
    }
}

impl FromStr for BalanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pg" => Ok(BalanceKind::Group),
            "pg_given_y" => Ok(BalanceKind::GroupGivenLabel),
            "pgy" => Ok(BalanceKind::Joint),
            other => Err(Error::InvalidArgument(format!("unknown balance objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceObjective {
    pub kind: BalanceKind,
    /// Target joint over `(y, g)`; `None` means uniform under `kind`.
    pub target: Option<JointDistribution>,
}

impl BalanceObjective {
    pub fn uniform(kind: BalanceKind) -> Self {
        Self { kind, target: None }
    }

    pub fn with_target(kind: BalanceKind, target: JointDistribution) -> Self {
        Self {
            kind,
            target: Some(target),
        }
    }

    fn check_shape(&self, dataset: &Dataset) -> Result<()> {
        if let Some(t) = &self.target {
            if t.label_count() != dataset.label_count() || t.group_count() != dataset.group_count() {
                return Err(Error::shape(
                    format!("{}x{} target", dataset.label_count(), dataset.group_count()),
                    format!("{}x{}", t.label_count(), t.group_count()),
                ));
            }
        }
        Ok(())
    }

    /// Target mass for every balancing cell, plus the empirical mass of the
    /// same cells. Cell layout depends on the kind: groups for `Group`,
    /// `(y, g)` row-major otherwise (conditional within `y` for `GroupGivenLabel`).
    fn cell_masses(&self, joint: &JointDistribution) -> Result<(Vec<f64>, Vec<f64>)> {
        let (ny, ng) = (joint.label_count(), joint.group_count());
        let target_joint = self.target.clone().unwrap_or_else(|| JointDistribution::uniform(ny, ng));
        match self.kind {
            BalanceKind::Joint => Ok((
                target_joint.probabilities().to_vec(),
                joint.probabilities().to_vec(),
            )),
            BalanceKind::Group => Ok((target_joint.group_marginal(), joint.group_marginal())),
            BalanceKind::GroupGivenLabel => {
                let t_y = target_joint.label_marginal();
                let e_y = joint.label_marginal();
                let mut target = vec![0.0; ny * ng];
                let mut empirical = vec![0.0; ny * ng];
                for y in 0..ny {
                    for g in 0..ng {
                        if t_y[y] > 0.0 {
                            target[y * ng + g] = target_joint.prob(y, g) / t_y[y];
                        }
                        if e_y[y] > 0.0 {
                            empirical[y * ng + g] = joint.prob(y, g) / e_y[y];
                        }
                    }
                }
                Ok((target, empirical))
            }
        }
    }

    /// Number of balancing cells; the factor between target-ratio and raw
    /// inverse-frequency weights under a uniform target.
    fn cell_count(&self, dataset: &Dataset) -> usize {
        match self.kind {
            BalanceKind::Joint => dataset.label_count() * dataset.group_count(),
            BalanceKind::Group | BalanceKind::GroupGivenLabel => dataset.group_count(),
        }
    }
}

fn cell_of(kind: BalanceKind, y: usize, g: usize, group_count: usize) -> usize {
    match kind {
        BalanceKind::Group => g,
        BalanceKind::GroupGivenLabel | BalanceKind::Joint => y * group_count + g,
    }
}

/// Strictly positive per-instance loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "weight {i} = {} is not finite and positive",
                weights[i]
            )));
        }
        Ok(Self(weights))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weights for a row subset, in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> WeightVector {
        Self(indices.iter().map(|&i| self.0[i]).collect())
    }

    /// One decimal per line, index-aligned with the dataset.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.0.len() * 24);
        for w in &self.0 {
            out.push_str(&format!("{w:.17e}\n"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut weights = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            weights.push(line.parse::<f64>().map_err(|_| {
                Error::parse(path.display(), format!("line {}", i + 1), format!("bad weight `{line}`"))
            })?);
        }
        Self::new(weights)
    }
}

/// Whether weights are `target / empirical` (mean one over the target) or the
/// raw inverse frequency `1 / p̃`, which is larger by the number of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightConvention {
    #[default]
    TargetRatio,
    InverseFrequency,
}

pub fn compute_weights(dataset: &Dataset, objective: &BalanceObjective) -> Result<WeightVector> {
    compute_weights_with(dataset, objective, WeightConvention::TargetRatio)
}

/// Per-instance weights `target(cell) / p̃(cell)`; the weighted empirical
/// distribution over cells then equals the target.
pub fn compute_weights_with(
    dataset: &Dataset,
    objective: &BalanceObjective,
    convention: WeightConvention,
) -> Result<WeightVector> {
    objective.check_shape(dataset)?;
    let joint = empirical_joint(dataset);
    let (target, empirical) = objective.cell_masses(&joint)?;
    let scale = match convention {
        WeightConvention::TargetRatio => 1.0,
        WeightConvention::InverseFrequency => objective.cell_count(dataset) as f64,
    };

    let ng = dataset.group_count();
    let mut cell_weight = vec![f64::NAN; target.len()];
    for (cell, w) in cell_weight.iter_mut().enumerate() {
        if empirical[cell] == 0.0 {
            log::warn!("balance cell {cell} is empty; its weight is unused");
            continue;
        }
        if target[cell] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cell {cell} is occupied but has zero target mass under {}",
                objective.kind
            )));
        }
        *w = scale * target[cell] / empirical[cell];
    }
    let weights = dataset
        .labels()
        .iter()
        .zip(dataset.groups())
        .map(|(&y, &g)| cell_weight[cell_of(objective.kind, y, g, ng)])
        .collect();
    WeightVector::new(weights)
}

/// Sub-samples every balancing cell without replacement so that the output
/// matches the objective: each cell is scaled to the binding (most
/// constrained) cell, which for a uniform target is the min rule.
pub fn downsample(dataset: &Dataset, objective: &BalanceObjective, seed: u64) -> Result<Dataset> {
    let indices = downsample_indices(dataset, objective, seed)?;
    dataset.subset(&indices)
}

/// Indices selected by [`downsample`], ordered by `(y, g)` cell.
pub fn downsample_indices(
    dataset: &Dataset,
    objective: &BalanceObjective,
    seed: u64,
) -> Result<Vec<usize>> {
    objective.check_shape(dataset)?;
    let joint = empirical_joint(dataset);
    let (target, _) = objective.cell_masses(&joint)?;
    let ng = dataset.group_count();
    let ny = dataset.label_count();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); target.len()];
    for (i, (&y, &g)) in dataset.labels().iter().zip(dataset.groups()).enumerate() {
        members[cell_of(objective.kind, y, g, ng)].push(i);
    }

    // Blocks of cells that are balanced against each other.
    let blocks: Vec<Vec<usize>> = match objective.kind {
        BalanceKind::Group | BalanceKind::Joint => vec![(0..target.len()).collect()],
        BalanceKind::GroupGivenLabel => (0..ny)
            .filter(|&y| joint.label_marginal()[y] > 0.0)
            .map(|y| (y * ng..(y + 1) * ng).collect())
            .collect(),
    };

    let mut sizes = vec![0usize; target.len()];
    for block in &blocks {
        let mut scale = f64::INFINITY;
        for &c in block {
            if target[c] <= 0.0 {
                if !members[c].is_empty() {
                    log::warn!("cell {c} has zero target mass and is dropped");
                }
                continue;
            }
            if members[c].is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "cell {c} is required by {} but empty",
                    objective.kind
                )));
            }
            scale = scale.min(members[c].len() as f64 / target[c]);
        }
        for &c in block {
            if target[c] > 0.0 {
                let size = (target[c] * scale + 1e-9).floor() as usize;
                sizes[c] = size.min(members[c].len());
            }
        }
    }

    let mut rng = seeded(seed, streams::DOWNSAMPLE);
    let mut chosen: Vec<usize> = Vec::with_capacity(sizes.iter().sum());
    for (cell, pool) in members.iter().enumerate() {
        if sizes[cell] == 0 {
            continue;
        }
        chosen.extend(index::sample(&mut rng, pool.len(), sizes[cell]).into_iter().map(|k| pool[k]));
    }
    let labels = dataset.labels();
    let groups = dataset.groups();
    chosen.sort_by_key(|&i| (labels[i], groups[i]));
    Ok(chosen)
}

/// Binary joint with mass `skew/2` on the stereotypical cells `(1,0)` and
/// `(0,1)` and `(1-skew)/2` on the other two.
pub fn skew_target(skew: f64, label_count: usize, group_count: usize) -> Result<JointDistribution> {
    if label_count != 2 || group_count != 2 {
        return Err(Error::Unsupported(format!(
            "skew targets need |Y|=|G|=2, got |Y|={label_count}, |G|={group_count}"
        )));
    }
    if !(skew > 0.0 && skew < 1.0) {
        return Err(Error::InvalidArgument(format!("skew {skew} must lie in (0, 1)")));
    }
    JointDistribution::from_probabilities(2, 2, stereotype_cells(skew))
}
