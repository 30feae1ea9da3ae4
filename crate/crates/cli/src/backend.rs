//! Where requests go: an embedded agent over a state file, or a live agent
//! over HTTP.

use std::path::{Path, PathBuf};
use std::time::Duration;

use netsmo_core::harness::Scenario;
use netsmo_core::{Agent, AgentConfig, ApiRequest, ApiResponse, Harness};
use serde_json::Value;

use crate::CliError;

pub enum Backend {
    Local(Local),
    Remote(Remote),
}

impl Backend {
    pub fn call(&self, req: &ApiRequest) -> Result<ApiResponse, CliError> {
        match self {
            Backend::Local(l) => Ok(l.agent.dispatch(req)),
            Backend::Remote(r) => r.call(req),
        }
    }

    /// Calls and unwraps `data`, turning error envelopes into [`CliError::Api`].
    pub fn data(&self, req: &ApiRequest) -> Result<Value, CliError> {
        let resp = self.call(req)?;
        match resp.data() {
            Some(d) => Ok(d.clone()),
            None => Err(CliError::from_response(&resp)),
        }
    }

    /// Writes the embedded agent's snapshot. A no-op for remote agents.
    pub fn close(self) -> Result<(), CliError> {
        match self {
            Backend::Local(l) => l
                .agent
                .shutdown(true)
                .map_err(|e| CliError::Internal(e.to_string())),
            Backend::Remote(_) => Ok(()),
        }
    }
}

pub struct Local {
    agent: Agent,
    _scratch: Option<tempfile::TempDir>,
}

/// The scenario used by an embedded store is kept next to it so later
/// invocations boot the same world.
fn sidecar(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".scenario.json");
    PathBuf::from(s)
}

fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    Scenario::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

impl Local {
    /// `store: None` runs on a throwaway state file.
    pub fn open(store: Option<&Path>, scenario: Option<&Path>) -> Result<Self, CliError> {
        let (scratch, store) = match store {
            Some(p) => (None, p.to_path_buf()),
            None => {
                let dir = tempfile::tempdir().map_err(|e| CliError::Internal(e.to_string()))?;
                let p = dir.path().join("state.json");
                (Some(dir), p)
            }
        };
        let scenario = match scenario {
            Some(p) => {
                let s = load_scenario(p)?;
                let text = serde_json::to_string_pretty(&s).expect("scenarios serialize");
                std::fs::write(sidecar(&store), text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", sidecar(&store).display())))?;
                s
            }
            None if sidecar(&store).exists() => load_scenario(&sidecar(&store))?,
            None => Scenario::new(1, Vec::new()),
        };
        let config = AgentConfig::sim(format!("netsmo-cli-{}:0", std::process::id()), store);
        let agent = Agent::boot(config, Harness::new(scenario)).map_err(|e| match e {
            netsmo_core::AgentError::InvalidConfig(_) | netsmo_core::AgentError::CorruptImage { .. } => {
                CliError::Usage(e.to_string())
            }
            e => CliError::Internal(e.to_string()),
        })?;
        Ok(Self {
            agent,
            _scratch: scratch,
        })
    }
}

pub struct Remote {
    base: String,
    http: ureq::Agent,
}

impl Remote {
    pub fn new(address: &str) -> Self {
        let base = if address.starts_with("http://") || address.starts_with("https://") {
            address.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", address.trim_end_matches('/'))
        };
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build();
        Self {
            base,
            http: ureq::Agent::new_with_config(config),
        }
    }

    fn call(&self, req: &ApiRequest) -> Result<ApiResponse, CliError> {
        let url = format!("{}{}", self.base, req.path);
        let unreachable = |e: ureq::Error| CliError::Internal(format!("agent at {} unreachable: {e}", self.base));
        let mut resp = match req.method.as_str() {
            "GET" => self.http.get(&url).call(),
            _ => self
                .http
                .post(&url)
                .header("content-type", "application/json")
                .send(req.body.to_string()),
        }
        .map_err(unreachable)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(unreachable)?;
        let body = serde_json::from_str(&text)
            .map_err(|e| CliError::Internal(format!("agent sent malformed JSON: {e}")))?;
        Ok(ApiResponse { status, body })
    }
}
