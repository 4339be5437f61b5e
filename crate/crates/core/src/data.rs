//! Datasets of fixed representations with a main-task label and a protected
//! group per instance, the synthetic skewed generator, splitting and file I/O.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, streams};

/// Magic prefix of the binary dataset format.
pub const BINARY_MAGIC: &[u8; 8] = b"FGDATA01";

/// `n × d` representation matrix plus per-instance label and group.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    label_count: usize,
    group_count: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        label_count: usize,
        group_count: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::InvalidDataset("dataset has no instances".into()));
        }
        if labels.len() != n || groups.len() != n {
            return Err(Error::InvalidDataset(format!(
                "length mismatch: {} feature rows, {} labels, {} groups",
                n,
                labels.len(),
                groups.len()
            )));
        }
        if label_count < 2 || group_count < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 labels and 2 groups, got |Y|={label_count}, |G|={group_count}"
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= label_count) {
            return Err(Error::InvalidDataset(format!(
                "instance {i}: label {} out of range for |Y|={label_count}",
                labels[i]
            )));
        }
        if let Some(i) = groups.iter().position(|&g| g >= group_count) {
            return Err(Error::InvalidDataset(format!(
                "instance {i}: group {} out of range for |G|={group_count}",
                groups[i]
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("features contain non-finite values".into()));
        }
        Ok(Self {
            features,
            labels,
            groups,
            label_count,
            group_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    /// Rows at `indices`, in that order. Panics on out-of-range indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.groups[i]).collect(),
            self.label_count,
            self.group_count,
        )
    }

    /// Same labels and groups over a different representation matrix.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Dataset> {
        Dataset::new(
            features,
            self.labels.clone(),
            self.groups.clone(),
            self.label_count,
            self.group_count,
        )
    }

    /// Instance indices of every `(y, g)` cell, row-major over `y` then `g`.
    pub fn cell_indices(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.label_count * self.group_count];
        for (i, (&y, &g)) in self.labels.iter().zip(&self.groups).enumerate() {
            cells[y * self.group_count + g].push(i);
        }
        cells
    }
}

/// Counts and probabilities over the `|Y| × |G|` cells, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    label_count: usize,
    group_count: usize,
    counts: Vec<u64>,
    probabilities: Vec<f64>,
}

impl JointDistribution {
    pub fn from_counts(label_count: usize, group_count: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != label_count * group_count {
            return Err(Error::shape(label_count * group_count, counts.len()));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("joint distribution has zero mass".into()));
        }
        let probabilities = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            label_count,
            group_count,
            counts,
            probabilities,
        })
    }

    /// A target distribution without counts (counts are left at zero).
    pub fn from_probabilities(
        label_count: usize,
        group_count: usize,
        probabilities: Vec<f64>,
    ) -> Result<Self> {
        if probabilities.len() != label_count * group_count {
            return Err(Error::shape(label_count * group_count, probabilities.len()));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            label_count,
            group_count,
            counts: vec![0; label_count * group_count],
            probabilities,
        })
    }

    pub fn uniform(label_count: usize, group_count: usize) -> Self {
        let cells = label_count * group_count;
        Self {
            label_count,
            group_count,
            counts: vec![0; cells],
            probabilities: vec![1.0 / cells as f64; cells],
        }
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn count(&self, y: usize, g: usize) -> u64 {
        self.counts[y * self.group_count + g]
    }

    pub fn prob(&self, y: usize, g: usize) -> f64 {
        self.probabilities[y * self.group_count + g]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Marginal `p(g)`.
    pub fn group_marginal(&self) -> Vec<f64> {
        (0..self.group_count)
            .map(|g| (0..self.label_count).map(|y| self.prob(y, g)).sum())
            .collect()
    }

    /// Marginal `p(y)`.
    pub fn label_marginal(&self) -> Vec<f64> {
        (0..self.label_count)
            .map(|y| (0..self.group_count).map(|g| self.prob(y, g)).sum())
            .collect()
    }
}

/// Exact per-cell counts of a dataset.
pub fn empirical_joint(dataset: &Dataset) -> JointDistribution {
    let g_count = dataset.group_count();
    let mut counts = vec![0u64; dataset.label_count() * g_count];
    for (&y, &g) in dataset.labels().iter().zip(dataset.groups()) {
        counts[y * g_count + g] += 1;
    }
    JointDistribution::from_counts(dataset.label_count(), g_count, counts)
        .expect("a valid dataset has at least one instance")
}

/// Parameters of the binary-label, binary-group skewed Gaussian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    /// Total mass on the stereotypical cells `(y=1, g=0)` and `(y=0, g=1)`.
    pub skew: f64,
    pub class_separation: f64,
    pub group_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "two")]
    pub label_count: usize,
    #[serde(default = "two")]
    pub group_count: usize,
}

fn two() -> usize {
    2
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label_count != 2 || self.group_count != 2 {
            return Err(Error::Unsupported(format!(
                "synthetic generator supports |Y|=|G|=2 only, got |Y|={}, |G|={}",
                self.label_count, self.group_count
            )));
        }
        let bad = |field: &str, why: &str| Err(Error::InvalidArgument(format!("{field}: {why}")));
        if !(self.skew > 0.0 && self.skew < 1.0) {
            return bad("skew", "must lie strictly between 0 and 1");
        }
        if self.n == 0 {
            return bad("n", "must be positive");
        }
        if self.d < 2 {
            return bad("d", "must be at least 2");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation", "must be positive");
        }
        if !(self.group_shift >= 0.0 && self.group_shift.is_finite()) {
            return bad("group_shift", "must be non-negative");
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be positive");
        }
        Ok(())
    }

    /// Target joint over `(y, g)` cells implied by `skew`.
    pub fn target_joint(&self) -> Vec<f64> {
        stereotype_cells(self.skew)
    }
}

/// Row-major `[(0,0), (0,1), (1,0), (1,1)]` masses for a stereotyping skew.
pub(crate) fn stereotype_cells(skew: f64) -> Vec<f64> {
    let anti = (1.0 - skew) / 2.0;
    let stereo = skew / 2.0;
    vec![anti, stereo, stereo, anti]
}

/// Integer cell sizes summing to `n`: `round(n·p)` per cell, then the surplus
/// or deficit is settled on the largest-mass cells, lowest index first.
pub(crate) fn exact_cell_counts(n: usize, masses: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = masses.iter().map(|p| (n as f64 * p).round() as usize).collect();
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
    let mut total: usize = counts.iter().sum();
    while total < n {
        counts[order[0]] += 1;
        total += 1;
    }
    let mut k = 0;
    while total > n {
        let c = order[k % order.len()];
        if counts[c] > 0 {
            counts[c] -= 1;
            total -= 1;
        }
        k += 1;
    }
    counts
}

/// Gaussian data whose cell sizes follow the configured skew exactly.
///
/// Class means sit at `±class_separation/2` on axis 0 and group offsets at
/// `±group_shift/2` on axis 1 (negative for index 0); every other axis is noise.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let counts = exact_cell_counts(config.n, &config.target_joint());
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
    let mut rng = seeded(config.seed, streams::SYNTHETIC);

    let n = config.n;
    let d = config.d;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(n);
    for (cell, &count) in counts.iter().enumerate() {
        let (y, g) = (cell / 2, cell % 2);
        let class_mean = if y == 1 { 0.5 } else { -0.5 } * config.class_separation;
        let group_mean = if g == 1 { 0.5 } else { -0.5 } * config.group_shift;
        for _ in 0..count {
            let mut x: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng)).collect();
            x[0] += class_mean;
            x[1] += group_mean;
            rows.push((y, g, x));
        }
    }
    rows.shuffle(&mut rng);

    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (y, g, x) in rows {
        labels.push(y);
        groups.push(g);
        features.extend(x);
    }
    let features = Array2::from_shape_vec((n, d), features).expect("n*d features");
    Dataset::new(features, labels, groups, 2, 2)
}

/// Split fractions for train, dev and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, dev: f64, test: f64) -> Self {
        Self { train, dev, test }
    }
}

/// Seeded partition of `0..n` into train/dev/test index sets.
pub fn split_indices(n: usize, fractions: SplitFractions, seed: u64) -> Result<[Vec<usize>; 3]> {
    let SplitFractions { train, dev, test } = fractions;
    if [train, dev, test].iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::InvalidArgument("split fractions must be positive".into()));
    }
    if (train + dev + test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {}, expected 1",
            train + dev + test
        )));
    }
    let n_train = ((n as f64 * train).round() as usize).min(n);
    let n_dev = ((n as f64 * dev).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_dev;
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(format!(
            "split of {n} instances leaves an empty part ({n_train}/{n_dev}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, streams::SPLIT));
    let test_part = order.split_off(n_train + n_dev);
    let dev_part = order.split_off(n_train);
    Ok([order, dev_part, test_part])
}

/// Train/dev/test parts of a dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    let [train, dev, test] = split_indices(dataset.len(), fractions, seed)?;
    Ok(Splits {
        train: dataset.subset(&train)?,
        dev: dataset.subset(&dev)?,
        test: dataset.subset(&test)?,
    })
}

/// On-disk dataset encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Text,
    Binary,
}

pub fn save_dataset(dataset: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let result = match format {
        DataFormat::Text => write_text(dataset, &mut w),
        DataFormat::Binary => write_binary(dataset, &mut w),
    };
    result.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_text(ds: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{} {} {} {}", ds.len(), ds.dim(), ds.label_count(), ds.group_count())?;
    for (i, row) in ds.features().outer_iter().enumerate() {
        write!(w, "{} {}", ds.labels[i], ds.groups[i])?;
        for v in row {
            write!(w, " {v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_binary(ds: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    for v in [ds.len(), ds.dim(), ds.label_count(), ds.group_count()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for (i, row) in ds.features().outer_iter().enumerate() {
        w.write_all(&(ds.labels[i] as u64).to_le_bytes())?;
        w.write_all(&(ds.groups[i] as u64).to_le_bytes())?;
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads either format; binary files are recognised by their magic prefix.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(BINARY_MAGIC) {
        read_binary(&bytes, &name)
    } else {
        read_text(BufReader::new(bytes.as_slice()), &name)
    }
}

fn read_text(reader: impl BufRead, name: &str) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::parse(name, "line 1", "empty file")),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::parse(name, format!("line {}", i + 1), e))?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
        }
    };
    let fields: Vec<&str> = header.1.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::parse(
            name,
            format!("line {}", header.0),
            "header must be `n d |Y| |G|`",
        ));
    }
    let mut dims = [0usize; 4];
    for (slot, field) in dims.iter_mut().zip(&fields) {
        *slot = field.parse().map_err(|_| {
            Error::parse(name, format!("line {}", header.0), format!("bad header field `{field}`"))
        })?;
    }
    let [n, d, y_count, g_count] = dims;
    if n == 0 {
        return Err(Error::parse(name, format!("line {}", header.0), "n must be positive"));
    }

    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (i, line) in lines {
        let loc = format!("line {}", i + 1);
        let line = line.map_err(|e| Error::parse(name, &loc, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if labels.len() == n {
            return Err(Error::parse(name, &loc, format!("more than {n} rows")));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != d + 2 {
            return Err(Error::parse(
                name,
                &loc,
                format!("expected {} fields, found {}", d + 2, tokens.len()),
            ));
        }
        let y: usize = tokens[0]
            .parse()
            .map_err(|_| Error::parse(name, &loc, format!("bad label `{}`", tokens[0])))?;
        let g: usize = tokens[1]
            .parse()
            .map_err(|_| Error::parse(name, &loc, format!("bad group `{}`", tokens[1])))?;
        if y >= y_count {
            return Err(Error::parse(name, &loc, format!("label {y} out of range for |Y|={y_count}")));
        }
        if g >= g_count {
            return Err(Error::parse(name, &loc, format!("group {g} out of range for |G|={g_count}")));
        }
        for tok in &tokens[2..] {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(name, &loc, format!("bad feature `{tok}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(name, &loc, "non-finite feature"));
            }
            features.push(v);
        }
        labels.push(y);
        groups.push(g);
    }
    if labels.len() != n {
        return Err(Error::parse(
            name,
            "end of file",
            format!("header declares {n} rows, found {}", labels.len()),
        ));
    }
    let features = Array2::from_shape_vec((n, d), features).expect("n*d features");
    Dataset::new(features, labels, groups, y_count, g_count)
        .map_err(|e| Error::parse(name, "dataset", e))
}

fn read_binary(bytes: &[u8], name: &str) -> Result<Dataset> {
    let mut cursor = &bytes[BINARY_MAGIC.len()..];
    let mut offset = BINARY_MAGIC.len();
    let mut next8 = |what: &str| -> Result<[u8; 8]> {
        let mut buf = [0u8; 8];
        cursor
            .read_exact(&mut buf)
            .map_err(|_| Error::parse(name, format!("offset {offset}"), format!("truncated {what}")))?;
        offset += 8;
        Ok(buf)
    };
    let mut dims = [0usize; 4];
    for slot in dims.iter_mut() {
        *slot = u64::from_le_bytes(next8("header")?) as usize;
    }
    let [n, d, y_count, g_count] = dims;
    if n == 0 {
        return Err(Error::parse(name, "offset 8", "n must be positive"));
    }
    let expected = 8 + 32 + n.saturating_mul(d + 2).saturating_mul(8);
    if bytes.len() != expected {
        return Err(Error::parse(
            name,
            format!("offset {}", bytes.len()),
            format!("file size {} does not match header (expected {expected})", bytes.len()),
        ));
    }
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for row in 0..n {
        let y = u64::from_le_bytes(next8("label")?) as usize;
        let g = u64::from_le_bytes(next8("group")?) as usize;
        if y >= y_count || g >= g_count {
            return Err(Error::parse(
                name,
                format!("row {row}"),
                format!("label/group ({y}, {g}) out of range for |Y|={y_count}, |G|={g_count}"),
            ));
        }
        labels.push(y);
        groups.push(g);
        for _ in 0..d {
            features.push(f64::from_le_bytes(next8("feature")?));
        }
    }
    let features = Array2::from_shape_vec((n, d), features).expect("n*d features");
    Dataset::new(features, labels, groups, y_count, g_count)
        .map_err(|e| Error::parse(name, "dataset", e))
}
