//! Command-line entry point: argument parsing, subcommand dispatch, and
//! artifact I/O (checkpoints, metrics CSVs, run manifests).
//!
//! Every subcommand is deterministic given its config and seed, so
//! repeated invocations produce byte-identical output files. Exit codes:
//! 0 success, 2 usage or configuration error, 3 numerical failure,
//! 4 I/O failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{
    write_drift_csv, write_metrics_csv, write_samples_csv, DriftTrialRow, RunManifest,
    StateCheckpoint, Step1Checkpoint,
};
use crate::diffusion::gradient_check_suite;
use crate::drift::{drift_report, DriftReport, GradientSet};
use crate::error::{Fl2tError, Result};
use crate::numerics::SeededRng;
use crate::pipeline::{
    build_model, build_tasks, consolidate_and_generate, run_baseline, run_experiment,
    run_order_experiment, train_step1, train_step2, ExperimentConfig, Step1Result, TaskOrder,
};

/// Largest tolerated relative error between analytic gradients and
/// central finite differences in `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "fl2t",
    version,
    about = "Order-agnostic consolidation of per-concept low-rank adapters \
             on a toy conditional diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one low-rank adapter per concept, each on its own data.
    TrainStep1 {
        /// Experiment configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Directory for step1.json and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Consolidate the per-concept adapters into one shared state.
    TrainStep2 {
        /// Experiment configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Directory for state.json and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Reuse a step-1 checkpoint instead of retraining it.
        #[arg(long)]
        step1: Option<PathBuf>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample points for one concept from a consolidated state.
    Generate {
        /// Experiment configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Consolidated state checkpoint (state.json from train-step2).
        #[arg(long)]
        state: PathBuf,
        /// Concept id to condition on.
        #[arg(long)]
        concept: usize,
        /// Number of samples to draw.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full two-step pipeline and write per-concept metrics.
    Evaluate {
        /// Experiment configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics.csv, state.json, and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sequential fine-tuning baseline for the forgetting comparison.
    Baseline {
        /// Experiment configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics.csv and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeat the pipeline under permuted visit orders and compare.
    OrderExperiment {
        /// Experiment configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// How many visit orders to run: the canonical order plus shuffles.
        #[arg(long, default_value_t = 3)]
        orders: usize,
        /// Directory for per-order metrics CSVs, summary.json, manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte-Carlo check of the drift bound and the damping construction.
    DriftAnalyze {
        /// Number of random gradient sets to analyze.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Gradient dimension.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Summary JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-trial CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Random seed for the trial gradients.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// One of r1, r1w, r2, r3, cdm, full, or all.
        #[arg(long, default_value = "all")]
        loss: String,
        /// Random instances to probe per loss.
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Base seed for the probe instances.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Parse arguments, run the selected subcommand, and return the process
/// exit code. Help and version requests exit 0; other parse failures
/// exit 2; runtime failures map through [`Fl2tError::exit_code`].
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::TrainStep1 { config, out, seed } => cmd_train_step1(&config, &out, seed),
        Command::TrainStep2 {
            config,
            out,
            step1,
            seed,
        } => cmd_train_step2(&config, &out, step1.as_deref(), seed),
        Command::Generate {
            config,
            state,
            concept,
            count,
            out,
            seed,
        } => cmd_generate(&config, &state, concept, count, &out, seed),
        Command::Evaluate { config, out, seed } => cmd_evaluate(&config, &out, seed),
        Command::Baseline { config, out, seed } => cmd_baseline(&config, &out, seed),
        Command::OrderExperiment {
            config,
            orders,
            out,
            seed,
        } => cmd_order_experiment(&config, orders, &out, seed),
        Command::DriftAnalyze {
            trials,
            dim,
            out,
            csv,
            seed,
        } => cmd_drift_analyze(trials, dim, &out, csv.as_deref(), seed),
        Command::Gradcheck { loss, points, seed } => cmd_gradcheck(&loss, points, seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(path)?;
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train_step1(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let (base, table, schedule) = build_model(&config)?;
    let tasks = build_tasks(&config)?;
    let step1 = train_step1(&config, &base, &schedule, &table, &tasks)?;
    for (concept, loss) in step1.final_losses.iter().enumerate() {
        eprintln!("concept {concept}: step-1 final loss {loss:.6}");
    }
    Step1Checkpoint::new(&step1.adapters, &step1.table).write(&out.join("step1.json"))?;
    RunManifest::new("train-step1", &config).write(&out.join("manifest.json"))?;
    eprintln!("wrote {}", out.join("step1.json").display());
    Ok(())
}

fn cmd_train_step2(
    config_path: &Path,
    out: &Path,
    step1_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let (base, table, schedule) = build_model(&config)?;
    let tasks = build_tasks(&config)?;
    let step1 = match step1_path {
        Some(path) => {
            let (adapters, trained) = Step1Checkpoint::read(path)?.restore()?;
            Step1Result {
                adapters,
                table: trained,
                final_losses: vec![f64::NAN; config.concepts],
            }
        }
        None => train_step1(&config, &base, &schedule, &table, &tasks)?,
    };
    let step2 = train_step2(&config, &base, &schedule, &step1, &tasks)?;
    for (concept, loss) in step2.final_losses.iter().enumerate() {
        eprintln!("concept {concept}: step-2 final loss {loss:.6}");
    }
    StateCheckpoint::new(&step2.state, &step2.table, &step2.bank).write(&out.join("state.json"))?;
    RunManifest::new("train-step2", &config).write(&out.join("manifest.json"))?;
    eprintln!("wrote {}", out.join("state.json").display());
    Ok(())
}

fn cmd_generate(
    config_path: &Path,
    state_path: &Path,
    concept: usize,
    count: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let (base, _, schedule) = build_model(&config)?;
    let (state, table, bank) = StateCheckpoint::read(state_path)?.restore()?;
    let samples =
        consolidate_and_generate(&config, &base, &schedule, &state, &table, &bank, concept, count)?;
    write_samples_csv(out, concept, table.concept_token(concept), &samples)?;
    eprintln!("wrote {} samples to {}", samples.rows(), out.display());
    Ok(())
}

fn cmd_evaluate(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let result = run_experiment(&config)?;
    for row in &result.rows {
        eprintln!(
            "concept {}: ia {:.4}, ims {:.4}, forgetting {:+.6}",
            row.concept_id, row.identity_alignment, row.identity_mean_similarity, row.forgetting
        );
    }
    write_metrics_csv(&out.join("metrics.csv"), &result.rows)?;
    StateCheckpoint::new(&result.state, &result.table, &result.bank)
        .write(&out.join("state.json"))?;
    RunManifest::new("evaluate", &config).write(&out.join("manifest.json"))?;
    eprintln!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

fn cmd_baseline(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let result = run_baseline(&config)?;
    for row in &result.rows {
        eprintln!(
            "concept {}: ia {:.4}, ims {:.4}, forgetting {:+.6}",
            row.concept_id, row.identity_alignment, row.identity_mean_similarity, row.forgetting
        );
    }
    write_metrics_csv(&out.join("metrics.csv"), &result.rows)?;
    RunManifest::new("baseline", &config).write(&out.join("manifest.json"))?;
    eprintln!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

/// What `order-experiment` writes to summary.json.
#[derive(Serialize)]
struct OrderSummary {
    orders: Vec<Vec<usize>>,
    lambda_max_dev: f64,
    ims_spread: f64,
    mean_forgetting: Vec<f64>,
}

fn cmd_order_experiment(
    config_path: &Path,
    orders: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let mut order_list = Vec::with_capacity(orders);
    for k in 0..orders {
        let order = if k == 0 {
            TaskOrder::Named("canonical".to_string())
        } else {
            TaskOrder::Named(format!("shuffled:{k}"))
        };
        order_list.push(order.resolve(config.concepts)?);
    }
    let result = run_order_experiment(&config, &order_list)?;
    for (k, run) in result.runs.iter().enumerate() {
        write_metrics_csv(&out.join(format!("metrics_order{k}.csv")), &run.rows)?;
    }
    let summary = OrderSummary {
        orders: result.orders,
        lambda_max_dev: result.lambda_max_dev,
        ims_spread: result.ims_spread,
        mean_forgetting: result.mean_forgetting,
    };
    crate::checkpoint::write_json(&out.join("summary.json"), &summary)?;
    RunManifest::new("order-experiment", &config).write(&out.join("manifest.json"))?;
    eprintln!(
        "ran {} orders: relevance deviation {:.3e}, ims spread {:.3e}",
        summary.orders.len(),
        summary.lambda_max_dev,
        summary.ims_spread
    );
    Ok(())
}

/// What `drift-analyze` writes to the summary JSON.
#[derive(Serialize)]
struct DriftSummary {
    trials: usize,
    dim: usize,
    seed: u64,
    /// Smallest `bound_rhs - norm_joint` observed; nonnegative up to roundoff.
    min_slack: f64,
    /// Trials where damping strictly reduced the drift norm.
    reduced_count: usize,
    degenerate_count: usize,
    example: DriftReport,
}

fn cmd_drift_analyze(
    trials: usize,
    dim: usize,
    out: &Path,
    csv: Option<&Path>,
    seed: u64,
) -> Result<()> {
    if trials == 0 {
        return Err(Fl2tError::Domain(
            "drift analysis needs at least one trial".into(),
        ));
    }
    if dim == 0 {
        return Err(Fl2tError::Domain(
            "drift gradients need at least one dimension".into(),
        ));
    }
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::with_capacity(trials);
    let mut example = None;
    let mut min_slack = f64::INFINITY;
    let mut reduced_count = 0;
    let mut degenerate_count = 0;
    for trial_id in 0..trials {
        let count = 2 + rng.next_index(7);
        let vectors: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..dim).map(|_| rng.next_gaussian()).collect())
            .collect();
        let set = GradientSet::new(vectors)?;
        let report = drift_report(&set)?;
        min_slack = min_slack.min(report.slack);
        let reduced = !report.degenerate && report.norm_reduced < report.norm_joint;
        if reduced {
            reduced_count += 1;
        }
        if report.degenerate {
            degenerate_count += 1;
        }
        rows.push(DriftTrialRow {
            trial_id,
            norm_joint: report.norm_joint,
            norm_reduced: report.norm_reduced,
            reduced,
        });
        if example.is_none() {
            example = Some(report);
        }
    }
    let summary = DriftSummary {
        trials,
        dim,
        seed,
        min_slack,
        reduced_count,
        degenerate_count,
        example: example.expect("at least one trial ran"),
    };
    crate::checkpoint::write_json(out, &summary)?;
    if let Some(csv_path) = csv {
        write_drift_csv(csv_path, &rows)?;
    }
    eprintln!(
        "{trials} trials: min slack {min_slack:.3e}, {reduced_count} reduced, \
         {degenerate_count} degenerate"
    );
    Ok(())
}

fn cmd_gradcheck(loss: &str, points: usize, seed: u64) -> Result<()> {
    let outcomes = gradient_check_suite(loss, points, seed)?;
    let mut worst = 0.0f64;
    for outcome in &outcomes {
        println!(
            "{}: max relative error {:.3e} over {} points",
            outcome.loss, outcome.max_relative_error, outcome.points
        );
        worst = worst.max(outcome.max_relative_error);
    }
    if worst > GRADCHECK_TOLERANCE {
        return Err(Fl2tError::Numerical(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}
