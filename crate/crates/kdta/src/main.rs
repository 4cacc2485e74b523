//! Command-line entry point for the distillation toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kdta::distill::load_soft_targets;
use kdta::ensemble::{de_optimize, read_labels_file, DEConfig, PredictionMatrixSet};
use kdta::models::{build_network, gradient_check_network, NetworkSpec};
use kdta::pipeline::{emit_report, gap_sweep, run_experiment, ExperimentConfig, RunSummary};
use kdta::rng::{rng_from, stage_seed};
use kdta::Tensor;

#[derive(Parser)]
#[command(
    name = "kdta",
    about = "Teacher / teaching-assistant / student distillation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the condition ladder described by a key=value config file.
    Experiment {
        /// Path to the experiment config.
        config: PathBuf,
    },
    /// Train teachers of several depths and distill each directly into
    /// the student (uses the config's sweep_teacher_sizes).
    GapSweep {
        /// Path to the experiment config.
        config: PathBuf,
    },
    /// Search ensemble weights for stored prediction matrices.
    ///
    /// All arguments but the last are KDST prediction files (one per
    /// member); the last is the labels sidecar (one class index per
    /// line). Prints the weights file content to stdout.
    Weights(WeightsArgs),
    /// Re-emit the summary report for an existing output directory.
    Report {
        output_dir: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Number of random seeds per layer configuration.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args)]
struct WeightsArgs {
    /// Member prediction files (KDST), then the labels file last.
    #[arg(required = true, num_args = 2..)]
    files: Vec<PathBuf>,
    /// Dataset identifier written to the weights file.
    #[arg(long, default_value = "custom")]
    dataset_id: String,
    /// Also write the weights file here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Population size; 0 means 15 x members.
    #[arg(long, default_value_t = 0)]
    population: usize,
    #[arg(long, default_value_t = 100)]
    generations: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> kdta::Result<()> {
    match cli.command {
        Command::Experiment { config } => {
            let cfg = load_config(&config)?;
            let summary = run_experiment(&cfg)?;
            print_summary(&summary);
        }
        Command::GapSweep { config } => {
            let cfg = load_config(&config)?;
            let sizes = cfg.sweep_teacher_sizes.clone();
            let summary = gap_sweep(&cfg, &sizes)?;
            print_summary(&summary);
        }
        Command::Weights(args) => weights_command(args)?,
        Command::Report { output_dir } => {
            let path = emit_report(&output_dir)?;
            println!("report: {}", path.display());
            let text = std::fs::read_to_string(&path)?;
            print!("{text}");
        }
        Command::Gradcheck { seeds } => gradcheck_command(seeds)?,
    }
    Ok(())
}

fn load_config(path: &PathBuf) -> kdta::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| kdta::Error::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse(&text)
}

fn print_summary(summary: &RunSummary) {
    println!("metrics: {}", summary.metrics_path.display());
    for w in &summary.weights_files {
        println!("weights: {}", w.display());
    }
    println!("report:  {}", summary.report_path.display());
}

fn weights_command(args: WeightsArgs) -> kdta::Result<()> {
    let (pred_paths, labels_path) = args.files.split_at(args.files.len() - 1);
    let labels = read_labels_file(&labels_path[0])?;
    let members: Vec<Tensor> = pred_paths
        .iter()
        .map(|p| load_soft_targets(p).map(|s| s.distributions().clone()))
        .collect::<kdta::Result<_>>()?;
    let set = PredictionMatrixSet::new(members, labels)?;
    let config = DEConfig {
        population_size: if args.population == 0 { None } else { Some(args.population) },
        max_generations: args.generations,
        seed: args.seed,
        ..Default::default()
    };
    let result = de_optimize(&set, &config)?;
    let line = result
        .weights
        .as_slice()
        .iter()
        .map(|w| format!("{w:.9}"))
        .collect::<Vec<_>>()
        .join(",");
    println!("{}", args.dataset_id);
    println!("{line}");
    println!("error={}", result.best_error);
    if let Some(out) = args.out {
        kdta::ensemble::write_weights_file(&out, &args.dataset_id, &result.weights, result.best_error)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn gradcheck_command(seeds: u64) -> kdta::Result<()> {
    use rand::Rng;
    let mut worst: f64 = 0.0;
    for (name, size_n, classes, side) in [
        ("one-cell", 1usize, 3usize, 6usize),
        ("two-cell", 2, 4, 8),
        ("three-cell", 3, 3, 8),
    ] {
        let mut layer_worst: f64 = 0.0;
        for s in 0..seeds {
            let spec = NetworkSpec::new(size_n, classes, (1, side, side), 3, stage_seed(s, "gc-net", 0));
            let mut net = build_network(&spec)?;
            let mut rng = rng_from(stage_seed(s, "gc-data", 0));
            let batch = Tensor::from_vec(
                &[2, 1, side, side],
                (0..2 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )?;
            let labels: Vec<usize> =
                (0..2).map(|_| rng.gen_range(0..classes)).collect();
            let err = gradient_check_network(&mut net, &batch, &labels)?;
            layer_worst = layer_worst.max(err);
        }
        println!("gradcheck {name:<10} max relative error {layer_worst:.3e}");
        worst = worst.max(layer_worst);
    }
    if worst < 1e-4 {
        println!("gradcheck PASS (worst {worst:.3e} < 1e-4)");
        Ok(())
    } else {
        Err(kdta::Error::Contract(format!(
            "gradient check failed: worst relative error {worst:.3e} >= 1e-4"
        )))
    }
}
