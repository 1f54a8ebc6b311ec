use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use popsynth::harness::{
    cmd_evaluate, cmd_report, cmd_run, cmd_simulate, cmd_split, cmd_synthesize, cmd_train, describe_population,
    summary_csv, EvaluateInputs, ExperimentConfig, CHECKPOINT_JSON, REPORT_JSON, SYNTHETIC_CSV,
};
use popsynth::schema::DecodeMode;
use popsynth::trainer::Variant;

#[derive(Parser)]
#[command(name = "popsynth", version, about = "Multi-source population synthesis experiments")]
struct Cli {
    /// Experiment config (TOML). Built-in desk-scale settings when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the command's random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decode {
    Argmax,
    Sample,
}

#[derive(Subcommand)]
enum Command {
    /// Build a ground-truth population.
    Simulate {
        /// Ground-truth spec file.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of individuals.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Draw the two training views from a population directory.
    Split {
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        n_a: Option<usize>,
        #[arg(long)]
        n_b: Option<usize>,
    },
    /// Train one model variant on two view files.
    Train {
        #[arg(long)]
        view_a: PathBuf,
        #[arg(long)]
        view_b: PathBuf,
        #[arg(long, default_value = "joint_igp")]
        variant: Variant,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample synthetic joint records from a checkpoint.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "argmax")]
        decode: Decode,
    },
    /// Score a synthetic table against the training views.
    Evaluate {
        #[arg(long)]
        view_a: PathBuf,
        #[arg(long)]
        view_b: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// Population directory, for recall and precision.
        #[arg(long, requires = "train_support")]
        population: Option<PathBuf>,
        #[arg(long, requires = "population")]
        train_support: Option<PathBuf>,
    },
    /// Run the full experiment described by the config.
    Run,
    /// Verify a finished run and rebuild its summary.
    Report,
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exp = experiment(&cli)?;
    match &cli.command {
        Command::Simulate { spec, size } => {
            let spec = spec.clone().or(exp.population.spec.clone());
            let out = out_or(&cli, "population");
            let seed = cli.seed.unwrap_or(exp.population.seed);
            let sim = cmd_simulate(spec.as_deref(), size.or(exp.population.size), seed, &out)?;
            print!("{}", describe_population(&sim.population));
            println!("wrote {}", out.display());
        }
        Command::Split { population, n_a, n_b } => {
            let out = out_or(&cli, "views");
            let seed = cli.seed.unwrap_or(exp.views.seed);
            let files = cmd_split(
                population,
                n_a.unwrap_or(exp.views.n_a),
                n_b.unwrap_or(exp.views.n_b),
                seed,
                &out,
            )?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Train {
            view_a,
            view_b,
            variant,
            epochs,
        } => {
            let mut cfg = exp.train_config(*variant, cli.seed.unwrap_or(0))?;
            if let Some(e) = epochs {
                cfg.epoch = *e;
            }
            let out = out_or(&cli, &variant.to_string());
            cmd_train(view_a, view_b, &cfg, &out)?;
            println!("wrote {}", out.join(CHECKPOINT_JSON).display());
        }
        Command::Synthesize { checkpoint, n, decode } => {
            let seed = cli.seed.unwrap_or(0);
            let mode = match decode {
                Decode::Argmax => DecodeMode::Argmax,
                Decode::Sample => DecodeMode::Sample { seed },
            };
            let out = out_or(&cli, SYNTHETIC_CSV);
            cmd_synthesize(checkpoint, *n, seed, mode, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            view_a,
            view_b,
            synthetic,
            population,
            train_support,
        } => {
            let mut metrics = exp.evaluation.metrics.clone();
            if let Some(s) = cli.seed {
                metrics.seed = s;
            }
            let inputs = EvaluateInputs {
                view_a: view_a.clone(),
                view_b: view_b.clone(),
                synthetic: synthetic.clone(),
                population: population.clone(),
                train_support: train_support.clone(),
            };
            let out = out_or(&cli, REPORT_JSON);
            let report = cmd_evaluate(&inputs, &metrics, &out)?;
            let s = &report.scores;
            println!(
                "s_distance {:.4}  s_corr {:.4}  s_pmse {:.4}  s_cr {:.4}  s_ml {:.4}  final {:.4}",
                s.s_distance, s.s_corr, s.s_pmse, s.s_cr, s.s_ml, s.final_score
            );
            if let Some(z) = &report.zeros {
                println!(
                    "recall {:.4}  precision {:.4}  f1 {:.4}",
                    z.recall, z.precision, z.f1
                );
            }
            if report.is_degenerate() {
                for f in &report.flags {
                    eprintln!("warning: {f}");
                }
                if report.views.is_empty() {
                    return Ok(ExitCode::from(2));
                }
            }
        }
        Command::Run => {
            let mut exp = exp;
            if let Some(s) = cli.seed {
                exp.replicates = vec![s];
            }
            if let Some(o) = &cli.out {
                exp.out_dir = o.clone();
            }
            let manifest = cmd_run(&exp)?;
            let summary = std::fs::read_to_string(exp.out_dir.join("summary.csv"))?;
            print!("{summary}");
            for f in &manifest.failures {
                eprintln!("cell {}_seed{} failed: {}", f.variant, f.seed, f.error);
            }
            if !manifest.failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report => {
            let dir = cli.out.clone().unwrap_or(exp.out_dir.clone());
            if !Path::new(&dir).is_dir() {
                bail!("run directory {} does not exist", dir.display());
            }
            print!("{}", summary_csv(&cmd_report(&dir)?));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
