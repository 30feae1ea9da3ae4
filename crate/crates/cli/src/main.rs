//! `netsmo`: deploy recipes, inspect deployments and measure service
//! overhead.
//!
//! Commands talk to a live agent at `NETSMO_API` unless `--store` names a
//! local state file, in which case an agent is booted in-process for the
//! duration of the command.

mod backend;
mod render;
mod serve;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netsmo_core::agent::DEFAULT_LISTEN_ADDRESS;
use netsmo_core::harness::Scenario;
use netsmo_core::recipe::{measure_overhead, parse_recipe, DeploymentReport, DeploymentStatus, Violation};
use netsmo_core::{Agent, AgentConfig, ApiRequest, ApiResponse, Harness, OverheadReport, OverlayNetwork};
use serde::Serialize;
use serde_json::{json, Value};

use backend::{Backend, Local, Remote};

const BENCH_SCHEMA: &str = "netsmo/bench/1";

#[derive(Parser)]
#[command(name = "netsmo", version, about = "Network services orchestration for multi-cloud deployments")]
struct Cli {
    /// Print exactly one JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Use this state file through an in-process agent instead of a live one.
    #[arg(long, global = true, value_name = "PATH")]
    store: Option<PathBuf>,

    /// Harness scenario (clouds, latencies, seed, faults).
    #[arg(long, global = true, value_name = "PATH")]
    scenario: Option<PathBuf>,

    /// Agent address.
    #[arg(long, global = true, env = "NETSMO_API", default_value = DEFAULT_LISTEN_ADDRESS)]
    api: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Submit a recipe and run it to completion.
    ///
    /// With `--scenario` and no `--store` the deployment runs on a
    /// throwaway in-process agent.
    Deploy { recipe: PathBuf },
    /// Show a deployment and its steps.
    Status { deployment_id: String },
    /// VPN overlays.
    Vpn {
        #[command(subcommand)]
        command: VpnCommand,
    },
    /// Registered services.
    Services {
        #[command(subcommand)]
        command: ServicesCommand,
    },
    /// Overhead of the recipe's network services over seeds 1..=N.
    Bench {
        recipe: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        repeat: u64,
    },
    /// Run an agent serving the HTTP API on `--api`.
    Serve,
}

#[derive(Subcommand)]
enum VpnCommand {
    /// Members of a deployment's overlay, server first.
    Show { deployment_id: String },
}

#[derive(Subcommand)]
enum ServicesCommand {
    List,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{message}")]
    Api {
        status: u16,
        code: String,
        message: String,
        details: Value,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
    /// The command ran but the deployment did not finish DONE.
    #[error("deployment {0} finished {1}")]
    Unsuccessful(String, DeploymentStatus, Box<Value>),
}

impl CliError {
    fn from_response(r: &ApiResponse) -> Self {
        CliError::Api {
            status: r.status,
            code: r.error_code().unwrap_or("INTERNAL").to_string(),
            message: r.error_message().unwrap_or("malformed error response").to_string(),
            details: r.body["error"]["details"].clone(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Api { status, .. } if *status < 500 => 1,
            CliError::Usage(_) | CliError::Unsuccessful(..) => 1,
            _ => 2,
        }
    }

    fn code(&self) -> &str {
        match self {
            CliError::Api { code, .. } => code,
            CliError::Usage(_) => "USAGE",
            CliError::Internal(_) => "INTERNAL",
            CliError::Unsuccessful(..) => "DEPLOYMENT_UNSUCCESSFUL",
        }
    }

    fn document(&self) -> Value {
        let mut error = json!({"code": self.code(), "message": self.to_string()});
        match self {
            CliError::Api { details, .. } if !details.is_null() => error["details"] = details.clone(),
            CliError::Unsuccessful(_, _, doc) => return json!({"ok": false, "error": error, "data": doc}),
            _ => {}
        }
        json!({"ok": false, "error": error})
    }

    /// Extra lines for humans, e.g. every recipe violation.
    fn explain(&self) -> Vec<String> {
        match self {
            CliError::Api { code, details, .. } if code == "RECIPE_VIOLATIONS" => {
                serde_json::from_value::<Vec<Violation>>(details.clone())
                    .map(|v| v.iter().map(|v| format!("  - {v}")).collect())
                    .unwrap_or_default()
            }
            _ => Vec::new(),
        }
    }
}

/// What a successful command prints.
struct Output {
    doc: Value,
    human: String,
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub schema: &'static str,
    pub runs: Vec<OverheadReport>,
    pub mean_overhead: f64,
    pub max_overhead: i64,
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn backend(cli: &Cli, ephemeral: bool) -> Result<Backend, CliError> {
    if cli.store.is_some() || ephemeral {
        Ok(Backend::Local(Local::open(cli.store.as_deref(), cli.scenario.as_deref())?))
    } else {
        Ok(Backend::Remote(Remote::new(&cli.api)))
    }
}

fn decode<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Internal(format!("unexpected {what} document: {e}")))
}

fn deploy(cli: &Cli, recipe: &Path) -> Result<Output, CliError> {
    let doc = read_json(recipe)?;
    let b = backend(cli, cli.scenario.is_some())?;
    let result = (|| {
        let created = b.data(&ApiRequest::post("/v1/deployments", doc))?;
        let id = created["deployment_id"].as_str().unwrap_or_default().to_string();
        let got = b.data(&ApiRequest::get(&format!("/v1/deployments/{id}")))?;
        let report: DeploymentReport = decode(got["report"].clone(), "report")?;
        let out = json!({"deployment_id": id, "status": report.status, "report": got["report"]});
        if report.status != DeploymentStatus::Done {
            return Err(CliError::Unsuccessful(id, report.status, Box::new(out)));
        }
        Ok(Output {
            human: render::report(&report),
            doc: out,
        })
    })();
    let closed = b.close();
    let out = result?;
    closed?;
    Ok(out)
}

fn read_only(cli: &Cli, path: &str, view: impl FnOnce(&Value) -> Result<String, CliError>) -> Result<Output, CliError> {
    let b = backend(cli, false)?;
    let result = b.data(&ApiRequest::get(path)).and_then(|doc| {
        let human = view(&doc)?;
        Ok(Output { doc, human })
    });
    let closed = b.close();
    let out = result?;
    closed?;
    Ok(out)
}

fn bench(cli: &Cli, recipe: &Path, repeat: u64) -> Result<Output, CliError> {
    let Some(sc) = cli.scenario.as_deref() else {
        return Err(CliError::Usage("bench needs --scenario".into()));
    };
    let recipe = parse_recipe(&read_json(recipe)?).map_err(|e| CliError::Usage(e.to_string()))?;
    let scenario = Scenario::load(sc).map_err(|e| CliError::Usage(format!("{}: {e}", sc.display())))?;
    let mut runs = Vec::new();
    for seed in 1..=repeat {
        let r = measure_overhead(&recipe, &scenario.clone().with_seed(seed)).map_err(|e| match e {
            netsmo_core::recipe::RecipeError::NoNetworkServices => CliError::Usage(e.to_string()),
            e => CliError::Internal(e.to_string()),
        })?;
        runs.push(r);
    }
    let summary = BenchSummary {
        schema: BENCH_SCHEMA,
        mean_overhead: runs.iter().map(|r| r.overhead as f64).sum::<f64>() / runs.len() as f64,
        max_overhead: runs.iter().map(|r| r.overhead).max().unwrap_or(0),
        runs,
    };
    Ok(Output {
        human: render::bench(&summary),
        doc: serde_json::to_value(&summary).expect("bench summary serializes"),
    })
}

fn serve_cmd(cli: &Cli) -> Result<Output, CliError> {
    let store = cli.store.clone().ok_or_else(|| CliError::Usage("serve needs --store".into()))?;
    let sc = cli
        .scenario
        .as_deref()
        .ok_or_else(|| CliError::Usage("serve needs --scenario".into()))?;
    let scenario = Scenario::load(sc).map_err(|e| CliError::Usage(format!("{}: {e}", sc.display())))?;
    let address = cli.api.trim_start_matches("http://").trim_end_matches('/').to_string();
    let agent = Agent::boot(
        AgentConfig {
            listen_address: address,
            store_path: store,
            sim_mode: false,
        },
        Harness::new(scenario),
    )
    .map_err(|e| match e {
        netsmo_core::AgentError::Listen { .. } | netsmo_core::AgentError::Bus(_) => {
            CliError::Internal(e.to_string())
        }
        e => CliError::Usage(e.to_string()),
    })?;
    serve::run(agent)?;
    Ok(Output {
        doc: json!({"stopped": true}),
        human: String::new(),
    })
}

fn run(cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Deploy { recipe } => deploy(cli, recipe),
        Command::Status { deployment_id } => {
            read_only(cli, &format!("/v1/deployments/{deployment_id}"), |d| {
                Ok(render::report(&decode(d["report"].clone(), "report")?))
            })
        }
        Command::Vpn {
            command: VpnCommand::Show { deployment_id },
        } => read_only(cli, &format!("/v1/deployments/{deployment_id}/vpn"), |d| {
            Ok(render::vpn(&decode::<OverlayNetwork>(d.clone(), "overlay")?))
        }),
        Command::Services {
            command: ServicesCommand::List,
        } => read_only(cli, "/v1/services", |d| Ok(render::services(d))),
        Command::Bench { recipe, repeat } => bench(cli, recipe, *repeat),
        Command::Serve => serve_cmd(cli),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = run(&cli);
    let mut stdout = std::io::stdout().lock();
    match result {
        Ok(out) => {
            let _ = if cli.json {
                writeln!(stdout, "{}", json!({"ok": true, "data": out.doc}))
            } else {
                write!(stdout, "{}", out.human)
            };
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                let _ = writeln!(stdout, "{}", e.document());
            } else {
                if let CliError::Unsuccessful(_, _, doc) = &e {
                    if let Ok(r) = serde_json::from_value::<DeploymentReport>(doc["report"].clone()) {
                        let _ = write!(stdout, "{}", render::report(&r));
                    }
                }
                eprintln!("error: {e}");
                for line in e.explain() {
                    eprintln!("{line}");
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
