use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use collective_cbf::filter::Prediction;
use collective_cbf::harness::{
    export_batch, export_record, export_timing, run_episode, run_monte_carlo_records, BatchSummary,
};
use collective_cbf::mission::{load_scenario, Scenario};
use collective_cbf::smoothing::Scheme;
use collective_cbf::verify::{run_verification, write_report};
use collective_cbf::{Error, Result};

const EXIT_CONFIG: u8 = 1;
const EXIT_UNSAFE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(
    version,
    about = "Safety-filtered receding-horizon control for noisy multi-agent ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictionArg {
    ClosedLoop,
    Nominal,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode, or a Monte Carlo batch with --runs > 1.
    Run {
        /// Scenario file (.toml or .json) or a bundled name
        /// (single-obstacle, multi-obstacle).
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        k: Option<u32>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Use the nominal law with the goal-repelling sign as printed.
        #[arg(long)]
        paper_literal_sign: bool,
        /// Where the horizon's CBF rows are placed.
        #[arg(long, value_enum, default_value = "closed-loop")]
        prediction: PredictionArg,
        /// Also write wall-clock solve times to timing.json.
        #[arg(long)]
        timing: bool,
    },
    /// Run the numerical oracles and write verify_report.json.
    Verify {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Random samples per check.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Check a scenario file and list every violated invariant.
    Validate {
        #[arg(long)]
        scenario: String,
    },
}

fn resolve_scenario(arg: &str) -> Result<Scenario> {
    if Path::new(arg).exists() {
        return load_scenario(arg);
    }
    let s = Scenario::bundled(arg).map_err(|_| {
        Error::config(format!(
            "no scenario file or bundled scenario named `{arg}`"
        ))
    })?;
    let violations = s.validate();
    if violations.is_empty() {
        Ok(s)
    } else {
        Err(Error::Invalid(violations))
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Run {
            scenario,
            beta,
            scheme,
            k,
            runs,
            seed,
            horizon,
            out,
            paper_literal_sign,
            prediction,
            timing,
        } => {
            let mut s = resolve_scenario(&scenario)?;
            if let Some(v) = beta {
                s.beta = v;
            }
            if let Some(v) = scheme {
                s.scheme = v;
            }
            if let Some(v) = k {
                s.k_smooth = v;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = horizon {
                s.horizon = v;
            }
            s.paper_literal_sign = paper_literal_sign;
            s.prediction = match prediction {
                PredictionArg::ClosedLoop => Prediction::ClosedLoop,
                PredictionArg::Nominal => Prediction::Nominal,
            };

            let batch = if runs <= 1 {
                let rec = run_episode(&s)?;
                export_record(&rec, &out)?;
                BatchSummary::from_records(std::slice::from_ref(&rec), s.n_agents)
            } else {
                let records = run_monte_carlo_records(&s, runs)?;
                let batch = BatchSummary::from_records(&records, s.n_agents);
                export_batch(&batch, &out)?;
                batch
            };
            if timing {
                export_timing(&batch, &out)?;
            }
            let n = batch.runs.len();
            println!(
                "runs {n}: safe {}/{n}, reached {}/{n}, aborted {}/{n}",
                batch.safe_runs, batch.reached_runs, batch.aborted_runs
            );
            let min_h = batch
                .runs
                .iter()
                .map(|r| r.min_h_exact)
                .fold(f64::INFINITY, f64::min);
            println!(
                "min h_exact {min_h:.6}, control deviation {:.3}",
                batch.control_deviation
            );
            println!("mean QP solve {:.3} ms", batch.mean_solve_time * 1e3);
            println!("wrote {}", out.display());
            Ok(if batch.safe_runs < n {
                EXIT_UNSAFE
            } else if batch.aborted_runs > 0 {
                EXIT_INFEASIBLE
            } else {
                0
            })
        }
        Command::Verify { out, samples } => {
            let report = run_verification(samples)?;
            write_report(&report, &out)?;
            for l in &report.lemma1 {
                println!(
                    "lemma 1  beta {:<4} measured {:.10} (closed form {:.10}, envelope {:.4})",
                    l.beta, l.measured, l.closed_form, l.printed_envelope
                );
            }
            for p in &report.prop1 {
                println!(
                    "prop 1   beta {:<4} max ratio {:.6}, violations {}/{}",
                    p.beta, p.max_ratio, p.violations, p.samples
                );
            }
            println!(
                "derivatives  gradient {:.3e}, hessian {:.3e}",
                report.derivatives.worst_gradient_rel, report.derivatives.worst_hessian_rel
            );
            println!(
                "qp oracle    {} problems, max deviation {:.3e}, status mismatches {}",
                report.qp.problems, report.qp.max_deviation, report.qp.status_mismatches
            );
            println!(
                "monitor      pass rate {:.4} (slope {}), identity alpha {:.4}",
                report.monitor_certified_alpha.pass_rate,
                report.monitor_certified_alpha.alpha_slope,
                report.monitor_identity_alpha.pass_rate
            );
            println!("wrote {}", out.join("verify_report.json").display());
            Ok(0)
        }
        Command::Validate { scenario } => {
            let s = match Path::new(&scenario).exists() {
                true => {
                    let text = std::fs::read_to_string(&scenario)?;
                    if scenario.ends_with(".json") {
                        Scenario::from_json_str(&text)?
                    } else {
                        Scenario::from_toml_str(&text)?
                    }
                }
                false => Scenario::bundled(&scenario)?,
            };
            let violations = s.validate();
            if violations.is_empty() {
                println!("ok");
                Ok(0)
            } else {
                for v in violations {
                    println!("{v}");
                }
                Ok(EXIT_CONFIG)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
