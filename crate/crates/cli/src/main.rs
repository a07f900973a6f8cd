use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use contam_core::backend::{BackendSpec, ReplayIndex};
use contam_core::config::{BackendsConfig, DatasetEntry, DetectorsConfig, RunConfig};
use contam_core::dataset::{DatasetMeta, Split};
use contam_core::oracle::build_contaminated_set;
use contam_core::report::{correlate_methods, render_compare, render_correlation, render_report, Format, Orientation};
use contam_core::result::{load_results, Method};
use contam_core::runner::{run_config, RunOptions, RunSummary};

/// Data contamination detectors for language models.
#[derive(Parser)]
#[command(name = "contam", version)]
struct Cli {
    /// Master seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for the result store or oracle files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent (detector, dataset) pairs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Report format: markdown, csv or json.
    #[arg(long, global = true, default_value = "markdown")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every detector in a JSON run config.
    Run { config: PathBuf },
    /// Min-K% token probability on one dataset split.
    Minkprob(SingleArgs),
    /// Canonical-order permutation test on one dataset split.
    CanonicalOrder(SingleArgs),
    /// Guided vs general completion overlap on one dataset split.
    TokenOverlap(SingleArgs),
    /// Word perturbation quiz on one dataset split.
    Wpq(SingleArgs),
    /// Local order quiz on one dataset split.
    LocalOrder(SingleArgs),
    /// Build a fine-tuning set with a known share of contaminated instances.
    OracleBuild(OracleArgs),
    /// Render a table from result files, run directories or stores.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Second result set shown side by side (e.g. after fine-tuning).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Spearman correlation between methods across result rows.
    Correlate {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// contamination-increasing or raw.
        #[arg(long, default_value = "contamination-increasing")]
        orientation: Orientation,
    },
    /// Re-run a recorded run from its journal without network access and
    /// check the results match.
    Replay {
        journal: PathBuf,
        /// Run config; defaults to config.json beside the journal.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SingleArgs {
    /// Subject backend spec (JSON file).
    #[arg(long)]
    backend: PathBuf,
    /// Perturbation generator spec; defaults to the subject.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Near-match judge spec; defaults to the subject.
    #[arg(long)]
    judge: Option<PathBuf>,
    /// Dataset JSONL file.
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset name used in prompts; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    description: Option<String>,
    /// Detector parameters as a JSON object, e.g. '{"k_percent": 10}'.
    #[arg(long, default_value = "{}")]
    params: String,
}

#[derive(Args)]
struct OracleArgs {
    /// Dataset JSONL file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Percentage of instances to contaminate, 0 to 100.
    #[arg(long)]
    proportion: f64,
    /// Instances packed into one training record.
    #[arg(long, default_value_t = 4)]
    pack_size: usize,
    /// Backend spec (JSON file) that writes the step-by-step solutions.
    #[arg(long)]
    generator: PathBuf,
}

fn read_spec(path: &Path) -> Result<BackendSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing backend spec {}", path.display()))
}

fn dataset_name(path: &Path, name: Option<String>) -> String {
    name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

fn single_config(method: Method, args: SingleArgs, seed: u64) -> Result<RunConfig> {
    let params: Value = serde_json::from_str(&args.params).context("--params must be a JSON object")?;
    let mut detectors = serde_json::Map::new();
    detectors.insert(method.as_str().to_string(), params);
    let detectors: DetectorsConfig =
        serde_json::from_value(Value::Object(detectors)).context("invalid detector parameters")?;
    let config = RunConfig {
        seed,
        output_dir: None,
        workers: None,
        backends: BackendsConfig {
            subject: read_spec(&args.backend)?,
            generator: args.generator.as_deref().map(read_spec).transpose()?,
            judge: args.judge.as_deref().map(read_spec).transpose()?,
        },
        datasets: vec![DatasetEntry {
            name: dataset_name(&args.dataset, args.name),
            split: args.split,
            path: Some(args.dataset),
            registry: None,
            description: args.description,
        }],
        detectors,
    };
    config.validate()?;
    Ok(config)
}

fn finish_run(summary: &RunSummary, format: Format) -> Result<ExitCode> {
    print!("{}", render_report(&summary.results, format)?);
    eprintln!("results written to {}", summary.run_dir.display());
    let failures = summary.failures();
    if failures > 0 {
        eprintln!("{failures} detector run(s) failed");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<contam_core::result::DetectorResult>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_results(p)?);
    }
    Ok(out)
}

fn replay(cli: &Cli, journal: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let run_dir = journal.parent().unwrap_or(Path::new("."));
    let config_path = config.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("config.json"));
    let mut cfg = RunConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let index = ReplayIndex::load(journal).with_context(|| format!("reading journal {}", journal.display()))?;
    // Never write into the recorded store: the replayed run has the same id.
    let scratch;
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    let summary = run_config(
        &cfg,
        &RunOptions {
            output_dir: Some(out),
            workers: cli.workers,
            replay: Some(Arc::new(index)),
        },
    )?;
    let original = load_results(run_dir)?;
    let mut mismatches = 0;
    for r in &summary.results {
        let same = original
            .iter()
            .find(|o| o.method == r.method && o.dataset == r.dataset && o.split == r.split);
        match same {
            Some(o) if o == r => {}
            Some(_) => {
                mismatches += 1;
                eprintln!("mismatch: {} on {}/{}", r.method, r.dataset, r.split);
            }
            None => {
                mismatches += 1;
                eprintln!("no recorded result for {} on {}/{}", r.method, r.dataset, r.split);
            }
        }
    }
    print!("{}", render_report(&summary.results, cli.format)?);
    if mismatches > 0 || summary.failures() > 0 {
        eprintln!("replay differs from the recorded run ({mismatches} mismatches)");
        return Ok(ExitCode::from(1));
    }
    eprintln!("replay matches the recorded run");
    Ok(ExitCode::SUCCESS)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let single = |method: Method, args: SingleArgs| -> Result<ExitCode> {
        let cfg = single_config(method, args, cli.seed.unwrap_or(0))?;
        let summary = run_config(
            &cfg,
            &RunOptions {
                output_dir: cli.out.clone(),
                workers: cli.workers,
                replay: None,
            },
        )?;
        finish_run(&summary, cli.format)
    };
    match cli.command {
        Command::Run { ref config } => {
            let mut cfg = RunConfig::load(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let summary = run_config(
                &cfg,
                &RunOptions {
                    output_dir: cli.out.clone(),
                    workers: cli.workers,
                    replay: None,
                },
            )?;
            finish_run(&summary, cli.format)
        }
        Command::Minkprob(args) => single(Method::MinK, args),
        Command::CanonicalOrder(args) => single(Method::CanonicalOrder, args),
        Command::TokenOverlap(args) => single(Method::TokenOverlap, args),
        Command::Wpq(args) => single(Method::Wpq, args),
        Command::LocalOrder(args) => single(Method::LocalOrder, args),
        Command::OracleBuild(ref args) => {
            let meta = DatasetMeta {
                name: dataset_name(&args.dataset, args.name.clone()),
                split: args.split,
                description: String::new(),
            };
            let dataset = contam_core::dataset::load_dataset(&args.dataset, meta)?;
            let generator = read_spec(&args.generator)?.build(None)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("oracle"));
            let built = build_contaminated_set(
                &dataset,
                args.proportion,
                args.pack_size,
                generator.as_ref(),
                cli.seed.unwrap_or(0),
                &out,
            )?;
            println!(
                "{} records covering {} instances -> {}",
                built.records.len(),
                built.manifest.included_instances,
                built.training_path.display()
            );
            println!("manifest -> {}", built.manifest_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report {
            ref results,
            ref compare,
        } => {
            let before = load_all(results)?;
            let doc = match compare {
                Some(after) => render_compare(&before, &load_results(after)?, cli.format)?,
                None => render_report(&before, cli.format)?,
            };
            print!("{doc}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Correlate {
            ref results,
            orientation,
        } => {
            let m = correlate_methods(&load_all(results)?, orientation)?;
            print!("{}", render_correlation(&m, cli.format));
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            ref journal,
            ref config,
        } => replay(&cli, journal, config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
