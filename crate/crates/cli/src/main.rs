use std::path::PathBuf;
use std::process::ExitCode;

use adapton_core::experiment::{parse_summary, run_experiment, slopes_from_summary, to_pretty, ExperimentConfig, Mode, RunOptions};
use adapton_core::system_model::{validate_system, StateSpaceModel};
use adapton_core::Error;
use clap::{Args, Parser, Subcommand};

const CONFIG_HELP: &str = "\
Config file (JSON). Keys and defaults:
  system       {\"kind\":\"random\", n:3, m:1, p:1, rho_target:0.7, seed:28, sigma_w2:1, sigma_z2:1}
               | {\"kind\":\"file\", path} (relative to the config) | {\"kind\":\"inline\", model}
  loss         {Q:1, R:1}; a scalar means that multiple of the identity
  adapton      T_w:max(128,He), T_base:T_w, sigma_u2:1, He:max(2n+1, ceil(2 ln T / ln(1/rho(A-FC)))) capped at max(40,2n+1),
               H:He, Hprime:3H, lambda:1, kappa_M:1.5 x norm sum of the LQG controller's DFC image,
               alpha_eff:smallest eigenvalue of the loss Hessian, dither_var:0,
               projection:radial (or exact)
  identify     {identifiers:[predictor_ls,naive_ls], controller:lqg_dfc, dither_var:0.01}
  T_values     required, non-empty; seeds: required, non-empty
  controllers  [adapton, explore_then_commit, lqg] (compare only)
  comparators  [best_dfc_hindsight, lqg_optimal]
  out_dir      null; write_runs: true
The resolved values are echoed into summary.json.";

#[derive(Parser)]
#[command(name = "adapton", version, about = "Closed-loop identification and adaptive DFC control experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a system file against the modelling assumptions.
    Validate { system: PathBuf },
    /// Identification-only sweep under a dithered closed-loop policy.
    #[command(long_about = CONFIG_HELP)]
    Identify(RunArgs),
    /// AdaptOn regret sweep.
    #[command(long_about = CONFIG_HELP)]
    Adapton(RunArgs),
    /// Every configured controller against the configured comparators.
    #[command(long_about = CONFIG_HELP)]
    Compare(RunArgs),
    /// Log-log slopes of the median curves in a summary file.
    Slopes { summary: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the resolved configuration and exit without simulating.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;

fn classify(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::Dimension { .. } | Error::InvalidArgument { .. } => {
            EXIT_CONFIG
        }
        _ => EXIT_RUN,
    }
}

fn run(mode: Mode, args: RunArgs) -> ExitCode {
    let (cfg, base) = match ExperimentConfig::load(&args.config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let opts = RunOptions {
        out_dir: args.out_dir,
        dry_run: args.dry_run,
        jobs: Some(args.jobs),
        seed: args.seed,
    };
    match run_experiment(&cfg, &base, mode, &opts) {
        Ok(out) => {
            if opts.dry_run {
                println!("{}", to_pretty(&out.summary));
                return ExitCode::SUCCESS;
            }
            for f in &out.files {
                eprintln!("wrote {}", f.display());
            }
            if let Some(fits) = out.summary.get("slope_fits").and_then(|v| v.as_object()) {
                for (metric, fit) in fits {
                    println!("{metric}: slope {}", fit["slope"]);
                }
            }
            if out.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &out.failures {
                    eprintln!("run failure: seed {} {}: {}", f.seed, f.controller.as_deref().unwrap_or("-"), f.error);
                }
                ExitCode::from(EXIT_RUN)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Validate { system } => {
            let model = std::fs::read_to_string(&system)
                .map_err(Error::from)
                .and_then(|s| StateSpaceModel::from_json_str(&s));
            let report = match model.and_then(|m| validate_system(&m)) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            for c in &report.checks {
                println!("{:<28} {} ({:.6e})", c.name, if c.passed { "pass" } else { "FAIL" }, c.measured);
            }
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CONFIG)
            }
        }
        Cmd::Identify(a) => run(Mode::Identify, a),
        Cmd::Adapton(a) => run(Mode::Adapton, a),
        Cmd::Compare(a) => run(Mode::Compare, a),
        Cmd::Slopes { summary } => {
            let fits = std::fs::read_to_string(&summary)
                .map_err(Error::from)
                .and_then(|s| parse_summary(&s))
                .and_then(|v| slopes_from_summary(&v));
            match fits {
                Ok(fits) => {
                    for (metric, f) in fits {
                        println!("{metric}: slope {:.6} intercept {:.6} residual {:.6}", f.slope, f.intercept, f.residual);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_CONFIG)
                }
            }
        }
    }
}
