use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use survrec::pipeline::{derive_seed, run_pipeline, run_pipeline_with_workers, DataSource, PipelineConfig, Stage};
use survrec::report::{emit_report, exit_code, summary_text};
use survrec::synth::{generate_synthetic, write_synthetic, SyntheticSpec};
use survrec::Error;

#[derive(Parser)]
#[command(name = "survrec", version, about = "Attribution-driven Cox model augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline with report emission.
    Run(Common),
    /// Load, split, fit and score the baseline Cox model.
    Baseline(Common),
    /// Also fit and score the random survival forest.
    Explore(Common),
    /// Also select cohorts, explain them and derive recommendations.
    Recommend(Common),
    /// Also fit the augmented Cox models.
    Augment(Common),
    /// Also score the augmented models and compare them with the baseline.
    Evaluate(Common),
    /// Generate a synthetic dataset with planted structure.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Bound the worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Pipeline config with a synthetic data section; the planted benchmark otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Accepted for uniformity; generation is sequential.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
    /// Rows of the planted benchmark when no config is given.
    #[arg(long, default_value_t = 2000)]
    n: usize,
}

fn config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Io { .. } | Error::Json(_))
}

fn fail(e: Error, config_stage: bool) -> ExitCode {
    eprintln!("error: {e}");
    if config_stage || config_error(&e) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn pipeline(args: &Common, until: Stage) -> ExitCode {
    let mut config = match PipelineConfig::from_file(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e, true),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = Some(out.clone());
    }
    let out_dir = config
        .output_dir
        .clone()
        .map(|p| if p.is_absolute() || args.out.is_some() { p } else { config.resolve(&p) })
        .unwrap_or_else(|| PathBuf::from("out"));
    let result = match args.workers {
        Some(0) => return fail(Error::Config("--workers must be >= 1".into()), true),
        Some(w) => run_pipeline_with_workers(&config, until, w),
        None => run_pipeline(&config, until),
    };
    let run = match result {
        Ok(run) => run,
        Err(e) => return fail(e, true),
    };
    if let Err(e) = emit_report(&run, &out_dir) {
        return fail(e, false);
    }
    print!("{}", summary_text(&run.report));
    println!("\nartifacts written to {}", out_dir.display());
    ExitCode::from(exit_code(&run.report) as u8)
}

fn synth(args: &SynthArgs) -> ExitCode {
    let (spec, master) = match &args.config {
        Some(path) => match PipelineConfig::from_file(path) {
            Ok(PipelineConfig {
                data: DataSource::Synthetic(spec),
                seed,
                ..
            }) => (spec, seed),
            Ok(_) => return fail(Error::Config(format!("{} has no synthetic data section", path.display())), true),
            Err(e) => return fail(e, true),
        },
        None => (SyntheticSpec::planted(args.n), 0),
    };
    let seed = derive_seed(args.seed.unwrap_or(master), "synth");
    if args.workers == Some(0) {
        return fail(Error::Config("--workers must be >= 1".into()), true);
    }
    let data = match generate_synthetic(&spec, seed) {
        Ok(d) => d,
        Err(e @ (Error::Argument(_) | Error::Calibration(_))) => return fail(e, true),
        Err(e) => return fail(e, false),
    };
    match write_synthetic(&data, &args.out) {
        Ok(files) => {
            println!(
                "{} rows, {:.1}% censored",
                data.dataset.n_rows(),
                100.0 * data.truth.realized_censoring
            );
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e, false),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(a) | Command::Evaluate(a) => pipeline(a, Stage::Evaluate),
        Command::Baseline(a) => pipeline(a, Stage::Baseline),
        Command::Explore(a) => pipeline(a, Stage::Explore),
        Command::Recommend(a) => pipeline(a, Stage::Recommend),
        Command::Augment(a) => pipeline(a, Stage::Augment),
        Command::Synth(a) => synth(a),
    }
}
