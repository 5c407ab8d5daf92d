use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unixkd::cli::{self, CostMethod};
use unixkd::dataset::SyntheticSpec;
use unixkd::HarnessError;

#[derive(Parser)]
#[command(name = "unixkd", version, about = "Uncertainty-aware mixup distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distil a student per a JSON config and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or load from cache) the configured teacher.
    Teacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a method's cost relative to conventional KD.
    Cost {
        #[arg(long = "N")]
        n: u64,
        #[arg(long)]
        k: u64,
        /// Teacher/student forward FLOP ratio F_t/F_s.
        #[arg(long)]
        ratio: String,
        /// B_s / F_s.
        #[arg(long = "backward-mult", default_value = "1")]
        backward_mult: String,
        #[arg(long, value_enum, default_value_t = CostMethod::Unix)]
        method: CostMethod,
    },
    /// Finite-difference check of every layer and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Write sampling, accuracy, centroid and entropy tables for a run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic blob dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        classes: usize,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        hardness: f64,
        /// Number of categories that receive planted label noise.
        #[arg(long = "hard-classes", default_value_t = 0)]
        hard_classes: usize,
        /// Fraction of each hard category's labels moved to the next hard
        /// category.
        #[arg(long = "label-noise", default_value_t = 0.0)]
        label_noise: f64,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config, out } => {
            let r = cli::train_command(&config, &out)?;
            println!(
                "{}: top-1 {:.2}%, relative cost {}%",
                r.config.method, r.final_top1, r.relative_cost_reported
            );
        }
        Command::Teacher { config, out } => {
            let r = cli::teacher_command(&config, &out)?;
            println!("teacher top-1 {:.2}%", r.test_top1);
        }
        Command::Cost {
            n,
            k,
            ratio,
            backward_mult,
            method,
        } => println!("{}", cli::cost_command(n, k, &ratio, &backward_mult, method)?),
        Command::Gradcheck { seeds } => {
            let results = cli::gradcheck_command(seeds)?;
            let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
            println!("{} checks passed, worst relative error {worst:.3e}", results.len());
        }
        Command::Analyze { run, out } => {
            let a = cli::analyze_command(&run, out.as_deref())?;
            match a.correlation {
                Some(rho) => println!("spearman rho {rho:.4}"),
                None => println!("spearman rho undefined"),
            }
            let u = &a.uniformity;
            println!(
                "chi-square vs class proportions: {:.3} (dof {}), p = {:.3e}",
                u.statistic, u.degrees_of_freedom, u.p_value
            );
        }
        Command::GenData {
            out,
            seed,
            classes,
            per_class,
            hardness,
            hard_classes,
            label_noise,
        } => {
            let mut spec = SyntheticSpec::new(classes, per_class, seed);
            spec.hardness = hardness;
            if hard_classes > 0 {
                spec = spec.with_planted_noise(hard_classes, label_noise);
            }
            let (train, test) = cli::gen_data_command(&out, &spec)?;
            println!("train {} samples ({}), test {} samples ({})", train.num_samples, train.digest, test.num_samples, test.digest);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
