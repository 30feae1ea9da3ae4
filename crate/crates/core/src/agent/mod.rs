//! The management entry point.
//!
//! An [`Agent`] owns the state store, the bus, the service framework and
//! the recipe engine. Callers only reach them through [`Agent::dispatch`],
//! which forwards each request as a REQUEST envelope on `api/<resource>`.

mod api;

use std::collections::HashSet;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, MessageBus};
use crate::clock::Tick;
use crate::harness::Harness;
use crate::recipe::{DeploymentStatus, RecipeEngine};
use crate::service::ServiceFramework;
use crate::store::{FileBackend, StateStore, StoreError};

pub use api::{ApiRequest, ApiResponse, RESOURCES};

pub const DEFAULT_LISTEN_ADDRESS: &str = "127.0.0.1:7474";

/// Ticks a northbound request may take before it is answered with TIMEOUT.
const REQUEST_TIMEOUT: Tick = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// `host:port` of the northbound API.
    pub listen_address: String,
    /// Snapshot file, read at boot and written at shutdown.
    pub store_path: PathBuf,
    /// Claim the address in an in-process registry instead of binding a
    /// socket.
    pub sim_mode: bool,
}

impl AgentConfig {
    pub fn sim(listen_address: impl Into<String>, store_path: impl Into<PathBuf>) -> Self {
        Self {
            listen_address: listen_address.into(),
            store_path: store_path.into(),
            sim_mode: true,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::InvalidConfig(m));
        match self.listen_address.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {}
            _ => return bad(format!("listen_address {:?} is not host:port", self.listen_address)),
        }
        if self.store_path.as_os_str().is_empty() {
            return bad("store_path is empty".into());
        }
        if self.store_path.is_dir() {
            return bad(format!("store_path {} is a directory", self.store_path.display()));
        }
        match self.store_path.parent() {
            Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => bad(format!(
                "store_path directory {} does not exist",
                dir.display()
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("address {0} is already in use")]
    AddressInUse(String),
    #[error("corrupt snapshot at {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("snapshot write to {path} failed: {reason}")]
    SnapshotWriteFailure { path: PathBuf, reason: String },
    #[error("cannot listen on {address}: {source}")]
    Listen {
        address: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Bus(#[from] BusError),
}

fn sim_addresses() -> &'static Mutex<HashSet<String>> {
    static ADDRS: OnceLock<Mutex<HashSet<String>>> = OnceLock::new();
    ADDRS.get_or_init(Default::default)
}

/// A running agent.
///
/// Internal components are not reachable from outside the crate, so the
/// registry and deployments change only through [`Agent::dispatch`]:
///
/// ```compile_fail
/// fn poke(agent: &netsmo_core::agent::Agent) {
///     let _ = agent.engine.framework();
/// }
/// ```
pub struct Agent {
    config: AgentConfig,
    engine: Arc<RecipeEngine>,
    bus: MessageBus,
    listener: Mutex<Option<TcpListener>>,
    halt_after: Arc<Mutex<Option<usize>>>,
    running: AtomicBool,
    resumed: Vec<String>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("config", &self.config)
            .field("running", &self.running.load(Ordering::SeqCst))
            .finish_non_exhaustive()
    }
}

impl Agent {
    /// Restores the store from `store_path` if a snapshot exists, starts the
    /// bus and the request handlers, claims the listen address and resumes
    /// deployments left RUNNING or INTERRUPTED.
    pub fn boot(config: AgentConfig, harness: Harness) -> Result<Self, AgentError> {
        config.validate()?;
        let clock = harness.clock().clone();
        let backend = FileBackend::new(&config.store_path);
        let store = StateStore::load_from(&backend, clock.clone()).map_err(|e| AgentError::CorruptImage {
            path: config.store_path.clone(),
            reason: e.to_string(),
        })?;
        clock.advance_to(store.latest_write_tick());

        let listener = Self::claim(&config)?;
        let release = |cfg: &AgentConfig| {
            if cfg.sim_mode {
                sim_addresses().lock().remove(&cfg.listen_address);
            }
        };

        let bus = MessageBus::new(clock, 0);
        let fw = ServiceFramework::new(store, bus.clone(), Arc::new(harness.clone()));
        let engine = Arc::new(RecipeEngine::new(fw, harness));
        let halt_after = Arc::new(Mutex::new(None));
        let handler = Arc::new(api::ApiHandler {
            engine: engine.clone(),
            halt_after: halt_after.clone(),
        });
        for r in RESOURCES {
            if let Err(e) = bus.subscribe(&format!("api/{r}"), Some("core-agent"), "core-agent", handler.clone()) {
                release(&config);
                return Err(e.into());
            }
        }

        let mut resumed = Vec::new();
        for id in engine.deployments() {
            if matches!(
                engine.status(&id),
                Ok(DeploymentStatus::Running | DeploymentStatus::Interrupted)
            ) {
                log::info!("resuming deployment {id}");
                match engine.resume(&id) {
                    Ok(r) => log::info!("deployment {id} finished {}", r.status),
                    Err(e) => log::warn!("resuming {id}: {e}"),
                }
                resumed.push(id);
            }
        }

        Ok(Self {
            config,
            engine,
            bus,
            listener: Mutex::new(listener),
            halt_after,
            running: AtomicBool::new(true),
            resumed,
        })
    }

    fn claim(config: &AgentConfig) -> Result<Option<TcpListener>, AgentError> {
        if config.sim_mode {
            if !sim_addresses().lock().insert(config.listen_address.clone()) {
                return Err(AgentError::AddressInUse(config.listen_address.clone()));
            }
            return Ok(None);
        }
        match TcpListener::bind(&config.listen_address) {
            Ok(l) => Ok(Some(l)),
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
                Err(AgentError::AddressInUse(config.listen_address.clone()))
            }
            Err(source) => Err(AgentError::Listen {
                address: config.listen_address.clone(),
                source,
            }),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn store_path(&self) -> &Path {
        &self.config.store_path
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::SeqCst)
    }

    /// Deployments resumed during boot.
    pub fn resumed(&self) -> &[String] {
        &self.resumed
    }

    /// The bound socket, for handing to an HTTP server. `None` in sim mode
    /// or once taken.
    pub fn take_listener(&self) -> Option<TcpListener> {
        self.listener.lock().take()
    }

    /// Current snapshot image of the live store.
    pub fn snapshot(&self) -> Vec<u8> {
        self.engine.store().snapshot()
    }

    /// Routes one request. Every failure becomes an error response.
    pub fn dispatch(&self, request: &ApiRequest) -> ApiResponse {
        if !self.is_running() {
            return ApiResponse::error(503, "UNAVAILABLE", "agent is shut down");
        }
        let Some(segs) = api::path_segments(&request.path) else {
            return ApiResponse::not_found(format!("no route for {}", request.path));
        };
        let payload = match serde_json::to_value(request) {
            Ok(p) => p,
            Err(e) => return ApiResponse::error(400, "BAD_REQUEST", e.to_string()),
        };
        let topic = format!("api/{}", segs[1]);
        match self.bus.request(&topic, "northbound", payload, REQUEST_TIMEOUT) {
            Ok(reply) => match serde_json::from_value::<ApiResponse>(reply.payload) {
                Ok(r) => r,
                Err(e) => ApiResponse::error(500, "INTERNAL", format!("malformed reply: {e}")),
            },
            Err(BusError::PayloadTooLarge { len }) => {
                ApiResponse::error(413, "PAYLOAD_TOO_LARGE", format!("request of {len} bytes"))
            }
            Err(BusError::Timeout { at }) => ApiResponse::error(504, "TIMEOUT", format!("no reply by tick {at}")),
            Err(BusError::BusClosed) => ApiResponse::error(503, "UNAVAILABLE", "agent is shut down"),
            Err(BusError::NestedRequest) => {
                ApiResponse::error(500, "INTERNAL", "dispatch called from inside a bus handler")
            }
            Err(e) => ApiResponse::error(500, "INTERNAL", e.to_string()),
        }
    }

    /// Stops accepting requests and writes the final snapshot.
    ///
    /// Steps are persisted as they start and end, so every deployment is
    /// already at a step boundary. With `drain`, RUNNING deployments are
    /// marked INTERRUPTED to record the clean stop; without it the image is
    /// written as is, like a crash. Either way the next boot resumes them.
    /// Calling it again is a no-op.
    pub fn shutdown(&self, drain: bool) -> Result<(), AgentError> {
        if !self.running.swap(false, Ordering::SeqCst) {
            return Ok(());
        }
        if drain {
            for id in self.engine.deployments() {
                if matches!(self.engine.status(&id), Ok(DeploymentStatus::Running)) {
                    if let Err(e) = self.engine.set_status(&id, DeploymentStatus::Interrupted) {
                        log::warn!("marking {id} interrupted: {e}");
                    }
                }
            }
        }
        self.bus.close();
        self.release_address();
        let backend = FileBackend::new(&self.config.store_path);
        let result = self.engine.store().save_to(&backend);
        self.engine.store().close();
        result.map_err(|e: StoreError| AgentError::SnapshotWriteFailure {
            path: self.config.store_path.clone(),
            reason: e.to_string(),
        })
    }

    fn release_address(&self) {
        if self.config.sim_mode {
            sim_addresses().lock().remove(&self.config.listen_address);
        }
        self.listener.lock().take();
    }

    /// Test hook: the next deployment submitted stops, as if the process
    /// died, after `steps` completed steps.
    #[doc(hidden)]
    pub fn set_halt_after(&self, steps: Option<usize>) {
        *self.halt_after.lock() = steps;
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        // Dropping without shutdown models a crash: no snapshot is written.
        if self.running.swap(false, Ordering::SeqCst) {
            self.bus.close();
            self.release_address();
        }
    }
}
