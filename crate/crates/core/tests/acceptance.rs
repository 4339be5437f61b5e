//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p fairgate --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fairgate::balance::{compute_weights, downsample_indices, BalanceKind, BalanceObjective};
use fairgate::data::{empirical_joint, generate_synthetic, Dataset, SyntheticConfig};
use fairgate::experiment::{load_config, load_splits, report_dirs, run_on, ExperimentConfig};
use fairgate::inlp::{apply_projection, fit_linear_probe, majority_rate, run_inlp, InlpConfig, SolverConfig};
use fairgate::metrics::{rms_gap, tpr_gap_per_class, tradeoff, EvalRecord, FairnessReport};
use fairgate::model::{bayes_average, softmax, Activation, GatePolicy, Model, ModelKind, ModelSpec};
use fairgate::par::{try_map_range, Execution};
use fairgate::train::gradient_check_error;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic")
}

fn shipped(name: &str) -> ExperimentConfig {
    load_config(&configs_dir().join(format!("{name}.toml"))).expect("shipped config loads")
}

// ---------------------------------------------------------------- 1 and 2

/// Accuracy and GAP in percent, printed trade-off, for Moji then Bios.
const TABLE: &[(&str, [f64; 3], [f64; 3])] = &[
    ("Standard", [71.59, 30.96, 0.261011311], [82.27, 15.96, 0.110176176]),
    ("INLP", [68.54, 33.83, 0.29983885], [70.54, 6.69, 0.144886815]),
    ("Adv", [74.25, 22.19, 0.162737646], [81.09, 12.70, 0.07684874]),
    ("DAdv", [74.52, 18.48, 0.123], [81.07, 12.56, 0.076]),
    ("DS", [71.90, 23.24, 0.177872903], [79.42, 9.66, 0.057]),
    ("RW", [74.01, 21.48, 0.155], [74.71, 7.35, 0.095372157]),
    ("Gate", [64.82, 65.20, 0.639775981], [82.37, 19.23, 0.144067797]),
    ("Gate+DS", [72.49, 16.33, 0.104086108], [79.44, 9.20, 0.053]),
    ("Gate+RW", [74.89, 13.77, 0.072], [74.89, 7.12, 0.092396001]),
    ("Gate soft 0.5", [72.68, 30.231639, 0.250383281], [80.820438, 11.612711, 0.066459204]),
    ("Gate soft Acc", [74.83, 20.29, 0.142094539], [81.13, 19.83, 0.15124881]),
    ("Gate soft RMS", [73.54, 7.06, 0.019], [80.54, 11.08, 0.063]),
    ("DAdv+DS", [72.21, 14.33, 0.085], [79.25, 9.89, 0.059]),
    ("INLP+DS", [72.14, 18.43, 0.127251166], [73.18, 5.91, 0.111695704]),
    ("DAdv+RW", [74.64, 18.91, 0.127081435], [74.09, 7.24, 0.102144188]),
    ("INLP+RW", [72.28, 15.68, 0.098867012], [73.58, 5.57, 0.106796117]),
];

const MOJI_BEST: (f64, f64) = (0.7489, 0.0706);
const BIOS_BEST: (f64, f64) = (0.8237, 0.0557);

fn tradeoff_arithmetic() -> Outcome {
    let cases = [
        ((0.7159, 0.3096), MOJI_BEST, 0.261),
        ((0.7452, 0.1848), MOJI_BEST, 0.123),
        ((0.8227, 0.1596), BIOS_BEST, 0.110),
    ];
    let mut worst: f64 = 0.0;
    let mut values = Vec::new();
    for ((acc, gap), (ba, bg), want) in cases {
        let got = tradeoff(acc, gap, ba, bg).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        values.push(format!("{got:.4}"));
    }
    ensure(worst <= 0.002, format!("[{}], max deviation {worst:.5}", values.join(", ")))
}

fn table_recomputation() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    for (name, moji, bios) in TABLE {
        for (row, (ba, bg)) in [(moji, MOJI_BEST), (bios, BIOS_BEST)] {
            let got = tradeoff(row[0] / 100.0, row[1] / 100.0, ba, bg).map_err(|e| e.to_string())?;
            let dev = (got - row[2]).abs();
            if dev > worst.0 {
                worst = (dev, name);
            }
        }
    }
    ensure(
        worst.0 <= 0.002,
        format!("{} entries, max deviation {:.5} ({})", 2 * TABLE.len(), worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- 3 and 4

fn synthetic(n: usize, d: usize, skew: f64, shift: f64, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n,
        d,
        skew,
        class_separation: 2.0,
        group_shift: shift,
        noise_std: 1.0,
        seed,
        label_count: 2,
        group_count: 2,
    })
    .unwrap()
}

fn reweighting_exactness() -> Outcome {
    let data = synthetic(10_000, 4, 0.8, 1.0, 3);
    let w = compute_weights(&data, &BalanceObjective::uniform(BalanceKind::Joint)).map_err(|e| e.to_string())?;
    let mut per_cell = [None::<f64>; 4];
    let mut mass = [0.0; 4];
    for ((&y, &g), &wi) in data.labels().iter().zip(data.groups()).zip(w.as_slice()) {
        let c = y * 2 + g;
        match per_cell[c] {
            None => per_cell[c] = Some(wi),
            Some(v) if v != wi => return Err(format!("cell {c} holds unequal weights {v} and {wi}")),
            _ => {}
        }
        mass[c] += wi;
    }
    // listed as (1,0), (1,1), (0,0), (0,1): the stereotypical cells (1,0) and
    // (0,1) hold 40% each at skew 0.8
    let order = [2, 3, 0, 1];
    let cells: Vec<f64> = order.iter().map(|&c| per_cell[c].unwrap()).collect();
    let scale = 2.5 / cells[0];
    let expected = [2.5, 10.0, 10.0, 2.5];
    let ratio_err = cells
        .iter()
        .zip(expected)
        .map(|(c, e)| (c * scale - e).abs())
        .fold(0.0, f64::max);
    let total: f64 = mass.iter().sum();
    let uniform_err = mass.iter().map(|m| (m / total - 0.25).abs()).fold(0.0, f64::max);
    ensure(
        ratio_err < 1e-12 && uniform_err < 1e-12,
        format!("cell weights {cells:?}, weighted-cell deviation {uniform_err:.1e}"),
    )
}

fn downsampling_exactness() -> Outcome {
    let counts = [((0, 0), 8), ((0, 1), 4), ((1, 0), 1), ((1, 1), 9)];
    let (mut labels, mut groups) = (Vec::new(), Vec::new());
    for ((y, g), k) in counts {
        labels.extend(std::iter::repeat_n(y, k));
        groups.extend(std::iter::repeat_n(g, k));
    }
    let n = labels.len();
    let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
    let data = Dataset::new(x, labels, groups, 2, 2).map_err(|e| e.to_string())?;

    let mut details = Vec::new();
    for (kind, size, cells) in [
        (BalanceKind::Joint, 4, [1, 1, 1, 1]),
        (BalanceKind::GroupGivenLabel, 10, [4, 4, 1, 1]),
    ] {
        let idx = downsample_indices(&data, &BalanceObjective::uniform(kind), 7).map_err(|e| e.to_string())?;
        let got = empirical_joint(&data.subset(&idx).map_err(|e| e.to_string())?);
        let mut unique = idx.clone();
        unique.sort_unstable();
        unique.dedup();
        if idx.len() != size || got.counts() != cells || unique.len() != idx.len() {
            return Err(format!("{kind:?}: size {} cells {:?}", idx.len(), got.counts()));
        }
        details.push(format!("{kind:?} size {size} cells {cells:?}"));
    }
    Ok(details.join("; "))
}

// ---------------------------------------------------------------- 5 and 6

fn random_model(kind: ModelKind, seed: u64) -> Model {
    let spec = ModelSpec {
        kind,
        input_dim: 4,
        hidden: 5,
        label_count: 3,
        group_count: 2,
        activation: Activation::Tanh,
    };
    let mut model = spec.build(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    let normal = Normal::new(0.0, 0.7).unwrap();
    let params: Vec<f64> = (0..model.num_params()).map(|_| normal.sample(&mut rng)).collect();
    model.set_params(&params).unwrap();
    model
}

fn random_batch(seed: u64, n: usize) -> (Array2<f64>, Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.5..1.5));
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    let groups = (0..n).map(|_| rng.random_range(0..2)).collect();
    let weights = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    (x, labels, groups, weights)
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..3 {
        let (x, y, g, w) = random_batch(100 + seed, 9);
        let model = random_model(ModelKind::Standard, seed);
        worst = worst.max(gradient_check_error(&model, x.view(), &y, &w, None, 1e-6).map_err(|e| e.to_string())?);
        checks += 1;
        let gated = random_model(ModelKind::Gated, seed);
        for policy in [
            GatePolicy::OneHot,
            GatePolicy::Uniform,
            GatePolicy::Soft { alpha: 0.25, beta: 0.7 },
        ] {
            let coeffs = policy.matrix(&g, 2).map_err(|e| e.to_string())?;
            worst = worst.max(
                gradient_check_error(&gated, x.view(), &y, &w, Some(&coeffs), 1e-6).map_err(|e| e.to_string())?,
            );
            checks += 1;
        }
    }
    ensure(worst < 1e-4, format!("{checks} checks over 3 seeds, max relative error {worst:.2e}"))
}

fn gating_identities() -> Outcome {
    let model = random_model(ModelKind::Gated, 11);
    let Model::Gated(gated) = &model else {
        return Err("expected a gated model".into());
    };
    let (x, _, g, _) = random_batch(12, 64);
    let forward = |p: GatePolicy| -> Result<Array2<f64>, String> {
        let c = p.matrix(&g, 2).map_err(|e| e.to_string())?;
        gated.forward(x.view(), &c).map_err(|e| e.to_string())
    };
    let zero = forward(GatePolicy::Soft { alpha: 0.0, beta: 0.0 })? == forward(GatePolicy::OneHot)?;
    let half = forward(GatePolicy::Soft { alpha: 0.5, beta: 0.5 })? == forward(GatePolicy::Uniform)?;
    let mut bayes = true;
    for (prior, group) in [([1.0, 0.0], 0), ([0.0, 1.0], 1)] {
        let c = GatePolicy::OneHot.matrix(&vec![group; x.nrows()], 2).map_err(|e| e.to_string())?;
        let onehot = softmax(&gated.forward(x.view(), &c).map_err(|e| e.to_string())?);
        bayes &= bayes_average(gated, x.view(), &prior).map_err(|e| e.to_string())? == onehot;
    }
    ensure(
        zero && half && bayes,
        format!("soft(0,0)==1-hot {zero}, soft(.5,.5)==uniform {half}, degenerate Bayes==1-hot {bayes} (bitwise)"),
    )
}

// ---------------------------------------------------------------- 7

/// Group signal along `axes` (unit shift each), class signal on the last axis.
fn planted(n: usize, d: usize, axes: &[Array1<f64>], seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut x = Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
    for (i, mut row) in x.outer_iter_mut().enumerate() {
        let sign = if groups[i] == 1 { 1.0 } else { -1.0 };
        for a in axes {
            row.scaled_add(sign, a);
        }
        row[d - 1] += if (i / 2) % 2 == 1 { 1.5 } else { -1.5 };
    }
    (x, groups)
}

fn inlp_properties() -> Outcome {
    let d = 8;
    let solver = SolverConfig::default();
    // One oblique direction. The fitted direction carries O(1/sqrt(n)) angular
    // error and the residual shift leaks into the refit, so the sample is large.
    let mut u: Array1<f64> = Array1::from(vec![1.0, -2.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0]);
    u /= u.dot(&u).sqrt();
    let one = InlpConfig {
        iterations: 1,
        stop_margin: 0.02,
        solver,
    };
    let mut refits = Vec::new();
    let mut majority: f64 = 0.0;
    for seed in 0..3 {
        let (x, g) = planted(20_000, d, &[&u * 1.2], 21 + seed);
        let stack = run_inlp(x.view(), &g, 2, &one).map_err(|e| e.to_string())?;
        let projected = apply_projection(&stack, x.view()).map_err(|e| e.to_string())?;
        let refit = fit_linear_probe(projected.view(), &g, 2, &solver).map_err(|e| e.to_string())?;
        majority = majority_rate(&g, 2);
        refits.push((stack.iterations[0].probe_accuracy, refit.accuracy));
    }
    let worst_refit = refits.iter().map(|r| r.1).fold(0.0, f64::max);
    let shown: Vec<String> = refits.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect();
    if worst_refit > majority + 0.02 {
        return Err(format!("probe {} vs majority {majority:.4}", shown.join(", ")));
    }

    // several independent directions for the projector and rank checks
    let axes: Vec<Array1<f64>> = (0..4)
        .map(|k| Array1::from_shape_fn(d, |j| if j == k { 0.8 + 0.3 * k as f64 } else { 0.0 }))
        .collect();
    let (x, g) = planted(4000, d, &axes, 22);
    let many = InlpConfig {
        iterations: 4,
        stop_margin: 0.0,
        solver,
    };
    let stack = run_inlp(x.view(), &g, 2, &many).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut ranks = vec![d];
    for k in 1..=stack.directions().len() {
        let s = stack.truncated(k).map_err(|e| e.to_string())?;
        let p = s.projection();
        let pp = p.dot(p);
        worst = pp.iter().zip(p.iter()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        for dir in s.directions() {
            worst = p.dot(dir).iter().map(|v| v.abs()).fold(worst, f64::max);
        }
        ranks.push(s.rank());
    }
    let per_iteration = stack.iterations.iter().all(|it| it.added_directions == 1);
    let steps_of_one = ranks.windows(2).all(|w| w[0] == w[1] + 1);
    ensure(
        worst <= 1e-10 && per_iteration && steps_of_one && ranks.len() > 1,
        format!(
            "probe {} (majority {majority:.3}); ranks {ranks:?}; max |PP-P|,|Pu| {worst:.1e}",
            shown.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8 to 10

/// Trains every (config, seed) pair into `root`, seeds and configs in parallel.
fn train_all(configs: &[ExperimentConfig], root: &Path) -> Result<(), String> {
    let splits: Vec<_> = configs
        .iter()
        .map(load_splits)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.eval.seeds.iter().map(move |&s| (i, s)))
        .collect();
    try_map_range(jobs.len(), Execution::Parallel, |j| {
        let (i, seed) = jobs[j];
        run_on(&configs[i], &splits[i], seed, root)
    })
    .map_err(|e| e.to_string())?;
    Ok(())
}

fn mean_gaps(root: &Path) -> Result<BTreeMap<String, (f64, f64)>, String> {
    let table = report_dirs(&[root.to_path_buf()]).map_err(|e| e.to_string())?;
    Ok(table
        .rows
        .iter()
        .map(|r| (r.label.clone(), (r.accuracy.mean, r.rms_gap.mean)))
        .collect())
}

fn directional_experiment() -> Outcome {
    let started = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let names = ["standard", "rw", "gate", "gate_rw", "gate_soft", "gate_bayes"];
    let configs: Vec<_> = names.iter().map(|n| shipped(n)).collect();
    if configs.iter().any(|c| c.eval.seeds.len() != 5) {
        return Err("shipped configs must list 5 seeds".into());
    }
    train_all(&configs, root.path())?;
    let rows = mean_gaps(root.path())?;
    let gap = |label: &str| rows.get(label).map(|r| r.1).ok_or(format!("missing row {label}"));
    let (standard, rw, gate, gate_rw, soft, bayes) = (
        gap("Standard")?,
        gap("RW")?,
        gap("Gate")?,
        gap("Gate+RW")?,
        gap("Gate+Soft")?,
        gap("Gate+Bayes")?,
    );
    let seconds = started.elapsed().as_secs_f64();
    let checks = [
        ("Gate > Standard", gate > standard),
        ("Standard > RW", standard > rw),
        ("Gate > Gate+RW", gate > gate_rw),
        ("Gate+RW <= 0.6 Gate", gate_rw <= 0.6 * gate),
        ("uniform soft <= Gate", soft <= gate),
        ("Bayes <= Gate", bayes <= gate),
        ("under 5 minutes", seconds < 300.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "test GAP Standard {standard:.4}, RW {rw:.4}, Gate {gate:.4}, Gate+RW {gate_rw:.4} ({:.2}x), \
         Gate+Soft {soft:.4}, Gate+Bayes {bayes:.4}; {seconds:.1}s{}",
        gate_rw / gate,
        if failed.is_empty() { String::new() } else { format!("; violated: {}", failed.join(", ")) }
    );
    ensure(failed.is_empty(), detail)
}

fn anti_stereotyping_sweep() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let targets = [0.3, 0.4, 0.5];
    let configs: Vec<_> = targets
        .iter()
        .map(|&t| {
            let mut c = shipped("rw");
            c.balance.target_skew = Some(t);
            c
        })
        .collect();
    train_all(&configs, root.path())?;
    let rows = mean_gaps(root.path())?;
    let mut gaps = Vec::new();
    for (t, c) in targets.iter().zip(&configs) {
        let (_, g) = rows.get(&c.label()).ok_or(format!("missing row for target {t}"))?;
        gaps.push((*t, *g));
    }
    let best = gaps.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let shown: Vec<String> = gaps.iter().map(|(t, g)| format!("{t}: {g:.4}")).collect();
    ensure(
        best.0 <= 0.5,
        format!("mean test GAP by target {{{}}}; minimum at {}", shown.join(", "), best.0),
    )
}

/// Every file in a run directory except the wall-clock record.
fn deterministic_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name != "timing.json" {
            out.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let configs = ["gate_rw", "inlp_rw", "ds"].map(|n| {
        let mut c = shipped(n);
        c.eval.seeds = vec![3];
        c
    });
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for root in &roots {
        train_all(&configs, root.path())?;
    }
    let mut compared = 0;
    for c in &configs {
        let a = deterministic_files(&c.run_dir(roots[0].path(), 3))?;
        let b = deterministic_files(&c.run_dir(roots[1].path(), 3))?;
        if a != b || !a.contains_key("checkpoint.bin") {
            let differing: Vec<_> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            return Err(format!("{}: files differ {differing:?}", c.label()));
        }
        compared += a.len();
    }
    Ok(format!("{compared} files bitwise identical across two runs of {} configs", configs.len()))
}

// ---------------------------------------------------------------- 11

fn metric_oracles() -> Outcome {
    // class 1: group 0 has 10 gold / 9 correct, group 1 has 10 gold / 5 correct
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (g, correct) in [(0, 9), (1, 5)] {
        for i in 0..10 {
            labels.push(1);
            groups.push(g);
            preds.push(if i < correct { 1 } else { 0 });
        }
    }
    let record = EvalRecord::new(preds, labels, groups, 2, 2).map_err(|e| e.to_string())?;
    let gap = tpr_gap_per_class(&record).map_err(|e| e.to_string())?[1].ok_or("class 1 gap undefined")?;
    let rms = rms_gap(&[0.3, 0.4]).map_err(|e| e.to_string())?;

    let data = synthetic(600, 2, 0.7, 1.0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy: Vec<usize> = data.labels().iter().map(|&y| if rng.random_bool(0.2) { 1 - y } else { y }).collect();
    let rec = EvalRecord::for_dataset(noisy, &data).map_err(|e| e.to_string())?;
    let a = FairnessReport::from_record(&rec, 0).map_err(|e| e.to_string())?;
    let b = FairnessReport::from_record(&rec.swap_groups().map_err(|e| e.to_string())?, 0).map_err(|e| e.to_string())?;
    let symmetric = a == b;
    ensure(
        (gap - 0.4).abs() < 1e-12 && (rms - 0.35355339059327373).abs() < 1e-9 && symmetric,
        format!("TPR gap {gap}, RMS {rms:.9}, relabel-symmetric {symmetric}"),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("trade-off arithmetic", tradeoff_arithmetic),
        ("table trade-off recomputation", table_recomputation),
        ("reweighting exactness", reweighting_exactness),
        ("downsampling exactness", downsampling_exactness),
        ("gradient correctness", gradient_correctness),
        ("gating identities", gating_identities),
        ("INLP properties", inlp_properties),
        ("directional bias experiment", directional_experiment),
        ("anti-stereotyping sweep", anti_stereotyping_sweep),
        ("determinism", determinism),
        ("metric oracles", metric_oracles),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
