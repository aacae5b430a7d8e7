use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use surveyor_core::perturbation::PerturbError;
use surveyor_core::survey::{load_questionnaire, Questionnaire};
use surveyor_engine::config::ExperimentConfig;
use surveyor_engine::mock::{MockScript, MockServer};
use surveyor_engine::orchestrator::{plan_run, preview, run, score_results, PreviewRequest, RunError, RunOptions};
use surveyor_engine::store::{RunState, QUESTIONNAIRE_FILE};

/// Exit statuses. Usage errors exit with 2 (the argument parser's default).
mod exit {
    pub const IO: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const PROVIDER: u8 = 4;
    pub const PARTIAL: u8 = 5;
}

#[derive(Parser)]
#[command(name = "surveyor", version, about = "Run questionnaire experiments against chat-completions models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every unit of a config and write the output directory.
    Run {
        config: PathBuf,
        /// Continue a previous run in the same output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Print the unit inventory of a config without running it.
    Plan {
        config: PathBuf,
        /// List every unit id.
        #[arg(long)]
        units: bool,
    },
    /// Print the prompts and wire requests for one persona, mode and method.
    Preview {
        config: PathBuf,
        #[arg(long)]
        persona: String,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        method: String,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a results file against reference answers.
    Score {
        results: PathBuf,
        reference: PathBuf,
        /// Base questionnaire; defaults to the one saved next to the results.
        #[arg(long)]
        questionnaire: Option<PathBuf>,
        /// Comma-separated reference attributes to stratify by.
        #[arg(long, value_delimiter = ',')]
        stratify: Vec<String>,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
    },
    /// Serve the deterministic mock provider described by a script.
    MockServe {
        script: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: SocketAddr,
        /// Append every received request to this JSONL file.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8088")]
        addr: SocketAddr,
        /// Directory relative config paths resolve against.
        #[arg(long, default_value = ".")]
        base_dir: PathBuf,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run_error_code(e: &RunError) -> u8 {
    match e {
        RunError::Config(_)
        | RunError::OutputExists(_)
        | RunError::DigestMismatch { .. }
        | RunError::Render(_)
        | RunError::Method(_)
        | RunError::Reference(_) => exit::CONFIG,
        RunError::Client(_) | RunError::Auth(_) => exit::PROVIDER,
        RunError::Perturb { source, .. } => match source {
            PerturbError::Provider(_) => exit::PROVIDER,
            PerturbError::Pipeline { source, .. } if matches!(**source, PerturbError::Provider(_)) => exit::PROVIDER,
            _ => exit::CONFIG,
        },
        RunError::Io(_) | RunError::Metric(_) => exit::IO,
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| fail(exit::CONFIG, e))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn load_base_questionnaire(results: &Path, explicit: Option<&Path>) -> Result<Questionnaire, String> {
    match explicit {
        Some(p) => load_questionnaire(p).map_err(|e| e.to_string()),
        None => {
            let p = results.parent().unwrap_or(Path::new(".")).join(QUESTIONNAIRE_FILE);
            let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e} (pass --questionnaire)", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

async fn dispatch(cli: Cli) -> ExitCode {
    match cli.command {
        Command::Run { config, resume } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run(&cfg, RunOptions { resume, live: None }).await {
                Ok(outcome) => {
                    let m = &outcome.manifest;
                    print_json(&json!({
                        "run_id": m.run_id,
                        "state": m.state,
                        "output_dir": cfg.output_path(),
                        "counts": m.counts,
                        "totals": m.totals,
                    }));
                    if m.state == RunState::Completed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(exit::PARTIAL)
                    }
                }
                Err(e) => fail(run_error_code(&e), e),
            }
        }
        Command::Plan { config, units } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match plan_run(&cfg) {
                Ok(plan) => {
                    let m = &plan.manifest;
                    let mut by_mode: BTreeMap<String, usize> = BTreeMap::new();
                    for u in &m.units {
                        *by_mode.entry(u.unit_id.mode.to_string()).or_default() += 1;
                    }
                    let mut out = json!({
                        "run_id": m.run_id,
                        "config_digest": m.config_digest,
                        "inventory_digest": m.inventory_digest,
                        "units": m.units.len(),
                        "units_by_mode": by_mode,
                        "variants": m.variants,
                    });
                    if units {
                        out["unit_ids"] = json!(m.units.iter().map(|u| u.unit_id.to_string()).collect::<Vec<_>>());
                    }
                    print_json(&out);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(exit::CONFIG, e),
            }
        }
        Command::Preview {
            config,
            persona,
            mode,
            method,
            variant,
            seed,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let inputs = match cfg.load_inputs() {
                Ok(i) => i,
                Err(e) => return fail(exit::CONFIG, e),
            };
            let req = PreviewRequest {
                persona,
                variant,
                mode,
                method,
                seed,
            };
            match preview(&cfg, &inputs, &req) {
                Ok(p) => {
                    println!("{}", p.to_json());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(exit::CONFIG, e),
            }
        }
        Command::Score {
            results,
            reference,
            questionnaire,
            stratify,
            format,
        } => {
            let q = match load_base_questionnaire(&results, questionnaire.as_deref()) {
                Ok(q) => q,
                Err(e) => return fail(exit::CONFIG, e),
            };
            match score_results(&results, &reference, &q, &stratify) {
                Ok(report) => {
                    match format {
                        ReportFormat::Json => println!("{}", report.to_json()),
                        ReportFormat::Csv => print!("{}", report.to_csv()),
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(run_error_code(&e), e),
            }
        }
        Command::MockServe {
            script,
            addr,
            transcript,
        } => {
            let text = match std::fs::read_to_string(&script) {
                Ok(t) => t,
                Err(e) => return fail(exit::CONFIG, format!("{}: {e}", script.display())),
            };
            let script = match MockScript::from_json(&text) {
                Ok(s) => s,
                Err(e) => return fail(exit::CONFIG, e),
            };
            let server = match MockServer::bind(script, addr, transcript).await {
                Ok(s) => s,
                Err(e) => return fail(exit::IO, e),
            };
            eprintln!("mock provider at {}", server.base_url());
            let _ = tokio::signal::ctrl_c().await;
            eprintln!("served {} requests, in-flight high-water mark {}", server.transcript().len(), server.high_water());
            server.shutdown().await;
            ExitCode::SUCCESS
        }
        Command::Serve { addr, base_dir } => {
            eprintln!("API listening on http://{addr}");
            match surveyor_engine::api::serve(addr, base_dir).await {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(exit::IO, e),
            }
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    dispatch(Cli::parse()).await
}
