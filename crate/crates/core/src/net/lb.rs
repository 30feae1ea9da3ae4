//! Load-balancer pools.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LbAlgorithm {
    RoundRobin,
    LeastConnections,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backend {
    pub node_id: String,
    pub port: u16,
    #[serde(default)]
    pub active_connections: u64,
    #[serde(default)]
    pub failed: bool,
}

impl Backend {
    pub fn new(node_id: impl Into<String>, port: u16) -> Self {
        Self {
            node_id: node_id.into(),
            port,
            active_connections: 0,
            failed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LbError {
    #[error("pool needs at least one backend")]
    NoBackends,
    #[error("no healthy backend")]
    NoHealthyBackend,
    #[error("backend index {0} out of range")]
    UnknownBackend(usize),
    #[error("backend {0} has no active connection to release")]
    NothingToRelease(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbPool {
    pub pool_id: String,
    pub listen_port: u16,
    pub algorithm: LbAlgorithm,
    backends: Vec<Backend>,
    /// Next round-robin position.
    #[serde(default)]
    cursor: usize,
}

impl LbPool {
    pub fn new(
        pool_id: impl Into<String>,
        listen_port: u16,
        algorithm: LbAlgorithm,
        backends: Vec<Backend>,
    ) -> Result<Self, LbError> {
        if backends.is_empty() {
            return Err(LbError::NoBackends);
        }
        Ok(Self {
            pool_id: pool_id.into(),
            listen_port,
            algorithm,
            backends,
            cursor: 0,
        })
    }

    pub fn backends(&self) -> &[Backend] {
        &self.backends
    }

    /// Chooses a backend and counts a new connection against it.
    ///
    /// Round-robin walks the list cyclically, skipping failed backends.
    /// Least-connections takes the smallest gauge, ties to the earliest
    /// backend in list order.
    pub fn pick(&mut self) -> Result<usize, LbError> {
        let idx = match self.algorithm {
            LbAlgorithm::RoundRobin => {
                let n = self.backends.len();
                let idx = (0..n)
                    .map(|off| (self.cursor + off) % n)
                    .find(|&i| !self.backends[i].failed)
                    .ok_or(LbError::NoHealthyBackend)?;
                self.cursor = (idx + 1) % n;
                idx
            }
            LbAlgorithm::LeastConnections => self
                .backends
                .iter()
                .enumerate()
                .filter(|(_, b)| !b.failed)
                .min_by_key(|(i, b)| (b.active_connections, *i))
                .map(|(i, _)| i)
                .ok_or(LbError::NoHealthyBackend)?,
        };
        self.backends[idx].active_connections += 1;
        Ok(idx)
    }

    pub fn release(&mut self, idx: usize) -> Result<(), LbError> {
        let b = self
            .backends
            .get_mut(idx)
            .ok_or(LbError::UnknownBackend(idx))?;
        if b.active_connections == 0 {
            return Err(LbError::NothingToRelease(idx));
        }
        b.active_connections -= 1;
        Ok(())
    }

    pub fn set_failed(&mut self, idx: usize, failed: bool) -> Result<(), LbError> {
        self.backends
            .get_mut(idx)
            .ok_or(LbError::UnknownBackend(idx))?
            .failed = failed;
        Ok(())
    }

    pub fn set_connections(&mut self, idx: usize, n: u64) -> Result<(), LbError> {
        self.backends
            .get_mut(idx)
            .ok_or(LbError::UnknownBackend(idx))?
            .active_connections = n;
        Ok(())
    }
}
