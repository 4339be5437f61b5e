//! Command-line driver for fairgate experiments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairgate::data::DataFormat;
use fairgate::experiment::{
    self, evaluate_run, generate_files, load_config, report_dirs, run_on, run_sweep, ExperimentConfig,
    RunRecord,
};
use fairgate::metrics::FairnessReport;
use fairgate::par::{self, Execution};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fairgate", version, about = "Balanced training and demographic gating experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test dataset files and print their cell counts
    Gen {
        #[command(flatten)]
        common: Common,
        /// On-disk dataset encoding
        #[arg(long, value_enum, default_value_t = DataFormatArg::Text)]
        data_format: DataFormatArg,
    },
    /// Train one seed (or every configured seed) and evaluate on dev and test
    Train(Common),
    /// Train with the config's INLP section enabled
    Inlp(Common),
    /// Sweep soft gating coefficients over a trained gated checkpoint
    Sweep(Common),
    /// Re-evaluate stored checkpoints
    Eval(Common),
    /// Aggregate completed runs into mean ± std per configuration
    Report {
        /// Run directories, or roots containing them (default: output root)
        dirs: Vec<PathBuf>,
        /// Output root
        #[arg(long, env = "FAIRGATE_OUT")]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of every seed listed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to `output.dir` in the config, then `runs`
    #[arg(long, env = "FAIRGATE_OUT")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormatArg {
    Text,
    Binary,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(load_config(&self.config)?)
    }

    fn root(&self, config: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| config.output.dir.as_ref().map(|d| config.resolve(d)))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn seeds(&self, config: &ExperimentConfig) -> Vec<u64> {
        self.seed.map_or_else(|| config.eval.seeds.clone(), |s| vec![s])
    }
}

#[derive(Serialize)]
struct RunSummary {
    label: String,
    seed: u64,
    run_dir: PathBuf,
    dev: FairnessReport,
    test: FairnessReport,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_summaries(rows: &[RunSummary], format: Format) -> Result<()> {
    match format {
        Format::Json => print_json(&rows),
        Format::Csv => {
            let mut out = String::from("label,seed,dev_accuracy,dev_rms_gap,test_accuracy,test_rms_gap,run_dir\n");
            for r in rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.label,
                    r.seed,
                    r.dev.accuracy,
                    r.dev.rms_gap,
                    r.test.accuracy,
                    r.test.rms_gap,
                    r.run_dir.display()
                )?;
            }
            print!("{out}");
            Ok(())
        }
    }
}

fn train_all(common: &Common, config: &ExperimentConfig) -> Result<()> {
    let root = common.root(config);
    let seeds = common.seeds(config);
    let splits = experiment::load_splits(config)?;
    let records: Vec<RunRecord> = par::try_map_range(seeds.len(), Execution::Parallel, |i| {
        run_on(config, &splits, seeds[i], &root)
    })?;
    let rows: Vec<RunSummary> = records
        .into_iter()
        .map(|r| RunSummary {
            run_dir: config.run_dir(&root, r.seed),
            label: r.label,
            seed: r.seed,
            dev: r.dev,
            test: r.test,
        })
        .collect();
    print_summaries(&rows, common.format)
}

fn existing_run(config: &ExperimentConfig, root: &Path, seed: u64) -> Result<PathBuf> {
    let dir = config.run_dir(root, seed);
    anyhow::ensure!(
        dir.join(experiment::CHECKPOINT_FILE).is_file(),
        "no trained run for seed {seed} in {}; run `fairgate train` first",
        dir.display()
    );
    Ok(dir)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, data_format } => {
            let config = common.load()?;
            let dir = common.out.clone().unwrap_or_else(|| common.root(&config).join("data"));
            let format = match data_format {
                DataFormatArg::Text => DataFormat::Text,
                DataFormatArg::Binary => DataFormat::Binary,
            };
            let summary = generate_files(&config, &dir, format)?;
            match common.format {
                Format::Json => print_json(&summary),
                Format::Csv => {
                    println!("split,y,g,count");
                    for s in &summary {
                        for c in &s.cells {
                            println!("{},{},{},{}", s.split, c.y, c.g, c.count);
                        }
                    }
                    Ok(())
                }
            }
        }
        Command::Train(common) => {
            let config = common.load()?;
            train_all(&common, &config)
        }
        Command::Inlp(common) => {
            let mut config = common.load()?;
            let section = config.inlp.as_mut().ok_or_else(|| fairgate::Error::Config {
                field: "inlp".into(),
                message: "the inlp command needs an [inlp] section".into(),
            })?;
            section.enabled = true;
            config.validate()?;
            train_all(&common, &config)
        }
        Command::Sweep(common) => {
            let config = common.load()?;
            let root = common.root(&config);
            let mut rows = Vec::new();
            for seed in common.seeds(&config) {
                let dir = existing_run(&config, &root, seed)?;
                let outcome = run_sweep(&config, &dir, seed)?;
                rows.push((seed, dir, outcome));
            }
            match common.format {
                Format::Json => {
                    let v: Vec<_> = rows
                        .iter()
                        .map(|(seed, dir, o)| serde_json::json!({"seed": seed, "run_dir": dir, "sweep": o}))
                        .collect();
                    print_json(&v)
                }
                Format::Csv => {
                    println!("seed,alpha,beta,dev_accuracy,dev_rms_gap,test_accuracy,test_rms_gap");
                    for (seed, _, o) in &rows {
                        println!(
                            "{seed},{},{},{},{},{},{}",
                            o.alpha, o.beta, o.dev.accuracy, o.dev.rms_gap, o.test.accuracy, o.test.rms_gap
                        );
                    }
                    Ok(())
                }
            }
        }
        Command::Eval(common) => {
            let config = common.load()?;
            let root = common.root(&config);
            let mut rows = Vec::new();
            for seed in common.seeds(&config) {
                let dir = existing_run(&config, &root, seed)?;
                let e = evaluate_run(&config, &dir, seed).with_context(|| format!("evaluating {}", dir.display()))?;
                rows.push(RunSummary {
                    label: config.label(),
                    seed,
                    run_dir: dir,
                    dev: e.dev,
                    test: e.test,
                });
            }
            print_summaries(&rows, common.format)
        }
        Command::Report { dirs, out, format } => {
            let dirs = if dirs.is_empty() {
                vec![out.unwrap_or_else(|| PathBuf::from("runs"))]
            } else {
                dirs
            };
            let table = report_dirs(&dirs)?;
            match format {
                Format::Json => println!("{}", table.to_json()?),
                Format::Csv => print!("{}", table.to_csv()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid_config = matches!(
                e.downcast_ref::<fairgate::Error>(),
                Some(fairgate::Error::Config { .. } | fairgate::Error::Parse { .. })
            );
            ExitCode::from(if invalid_config { 2 } else { 1 })
        }
    }
}
