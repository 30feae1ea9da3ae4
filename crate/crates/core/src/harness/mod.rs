//! Deterministic multi-cloud world model.
//!
//! Clouds hand out nodes after a sampled provisioning latency, node agents
//! boot and run execution units, and a reachability layer answers packet
//! probes over underlay and overlay addresses. Everything runs on the shared
//! logical clock and every state change is appended to a trace.

mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bus::Document;
use crate::clock::{Clock, Tick};
use crate::net::firewall::{FirewallPolicy, Flow};
use crate::net::overlay::{self, BlockReason, SendResult, SimPacket};
use crate::net::vpn::OverlayNetwork;
use crate::recipe::StepKind;
use crate::service::{LaunchSpec, LaunchedUnit, NodeDriver};
use crate::store::{StateKey, StateStore};

pub use scenario::{CloudSpec, FaultMode, FaultSpec, FaultTarget, Latency, Scenario, ScenarioError};

/// Base of the simulated underlay address space, 172.16.0.0/12.
const UNDERLAY_BASE: u32 = 0xAC10_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentState {
    Down,
    Booting,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnitState {
    Created,
    Running,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecUnit {
    pub unit_id: String,
    pub image_ref: String,
    pub state: UnitState,
    pub owner_instance: String,
    /// Tick at which the unit finished starting.
    pub ready_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimNode {
    pub node_id: String,
    pub cloud_id: String,
    pub deployment_id: String,
    pub underlay_address: Ipv4Addr,
    pub roles: BTreeSet<String>,
    pub public: bool,
    pub agent_state: AgentState,
    /// Tick at which provisioning completes.
    pub ready_at: Tick,
    pub units: Vec<ExecUnit>,
}

/// What the caller wants provisioned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRequest {
    pub node_id: String,
    pub cloud_id: String,
    pub deployment_id: String,
    pub roles: BTreeSet<String>,
    /// Forces a public address even on a private cloud.
    pub public: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: Tick,
    pub kind: String,
    pub target: String,
    pub detail: Document,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("unknown cloud {0}")]
    UnknownCloud(String),
    #[error("cloud {cloud_id} is at capacity {capacity}")]
    CapacityExceeded { cloud_id: String, capacity: u32 },
    #[error("provisioning on cloud {0} failed (injected)")]
    ProvisionFault(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is still provisioning")]
    NotProvisioned(String),
    #[error("agent on {0} is already up")]
    AlreadyUp(String),
    #[error("agent on {0} is down")]
    AgentDown(String),
    #[error("launch on {node_id} failed (injected), unit {unit_id}")]
    LaunchFault { node_id: String, unit_id: String },
    #[error("unknown unit {0}")]
    UnknownUnit(String),
    #[error("unknown fault target {0:?}")]
    UnknownTarget(FaultTarget),
}

struct CloudState {
    spec: CloudSpec,
    rng: ChaCha8Rng,
    nodes: usize,
}

struct World {
    scenario: Scenario,
    clouds: BTreeMap<String, CloudState>,
    nodes: BTreeMap<String, SimNode>,
    next_address: u32,
    next_unit: u64,
    faults: Vec<(FaultTarget, FaultMode)>,
    overlays: BTreeMap<String, OverlayNetwork>,
    firewalls: BTreeMap<String, FirewallPolicy>,
    trace: Vec<TraceEvent>,
    store: Option<StateStore>,
}

impl World {
    fn record(&mut self, tick: Tick, kind: &str, target: &str, detail: Document) {
        self.trace.push(TraceEvent {
            tick,
            kind: kind.to_string(),
            target: target.to_string(),
            detail,
        });
    }

    /// Checks for a matching fault, consuming it when it fires once.
    fn take_fault(&mut self, matches: impl Fn(&FaultTarget) -> bool) -> bool {
        match self.faults.iter().position(|(t, _)| matches(t)) {
            Some(i) => {
                if self.faults[i].1 == FaultMode::FailOnce {
                    self.faults.remove(i);
                }
                true
            }
            None => false,
        }
    }

    fn node_by_address(&self, addr: Ipv4Addr) -> Option<&SimNode> {
        self.nodes.values().find(|n| n.underlay_address == addr)
    }

    fn underlay_reachable(a: &SimNode, b: &SimNode) -> bool {
        a.deployment_id == b.deployment_id || (a.public && b.public)
    }
}

fn cloud_rng(seed: u64, cloud_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(cloud_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Shared handle to one simulated world.
#[derive(Clone)]
pub struct Harness {
    clock: Clock,
    world: Arc<Mutex<World>>,
}

impl std::fmt::Debug for Harness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Harness")
            .field("now", &self.clock.now())
            .finish_non_exhaustive()
    }
}

impl Harness {
    pub fn new(scenario: Scenario) -> Self {
        Self::with_clock(scenario, Clock::new())
    }

    pub fn with_clock(scenario: Scenario, clock: Clock) -> Self {
        let clouds = scenario
            .clouds
            .iter()
            .map(|c| {
                let st = CloudState {
                    spec: c.clone(),
                    rng: cloud_rng(scenario.seed, &c.cloud_id),
                    nodes: 0,
                };
                (c.cloud_id.clone(), st)
            })
            .collect();
        let faults = scenario
            .faults
            .iter()
            .map(|f| (f.target.clone(), f.mode))
            .collect();
        Self {
            clock,
            world: Arc::new(Mutex::new(World {
                scenario,
                clouds,
                nodes: BTreeMap::new(),
                next_address: 0,
                next_unit: 0,
                faults,
                overlays: BTreeMap::new(),
                firewalls: BTreeMap::new(),
                trace: Vec::new(),
                store: None,
            })),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn now(&self) -> Tick {
        self.clock.now()
    }

    pub fn scenario(&self) -> Scenario {
        self.world.lock().scenario.clone()
    }

    /// Agents publish discovery keys into `store` when they boot.
    pub fn attach_store(&self, store: StateStore) {
        self.world.lock().store = Some(store);
    }

    pub fn record(&self, kind: &str, target: &str, detail: Document) {
        let now = self.clock.now();
        self.world.lock().record(now, kind, target, detail);
    }

    /// Creates a node whose provisioning completes at the returned tick.
    ///
    /// Asking again for an existing node id returns its original completion
    /// tick without provisioning anything.
    pub fn provision_node(&self, req: &NodeRequest) -> Result<Tick, HarnessError> {
        let now = self.clock.now();
        let mut w = self.world.lock();
        if let Some(n) = w.nodes.get(&req.node_id) {
            return Ok(n.ready_at);
        }
        let cloud = w
            .clouds
            .get(&req.cloud_id)
            .ok_or_else(|| HarnessError::UnknownCloud(req.cloud_id.clone()))?;
        if cloud.nodes >= cloud.spec.capacity as usize {
            return Err(HarnessError::CapacityExceeded {
                cloud_id: req.cloud_id.clone(),
                capacity: cloud.spec.capacity,
            });
        }
        if w.take_fault(|t| matches!(t, FaultTarget::Cloud(c) if *c == req.cloud_id)) {
            w.record(now, "provision.fault", &req.node_id, json!({"cloud": req.cloud_id}));
            return Err(HarnessError::ProvisionFault(req.cloud_id.clone()));
        }
        let cloud = w.clouds.get_mut(&req.cloud_id).expect("checked above");
        let latency = match cloud.spec.provision_latency {
            Latency::Fixed(t) => t,
            Latency::Uniform([lo, hi]) => cloud.rng.random_range(lo..=hi),
        };
        cloud.nodes += 1;
        let public = req.public || cloud.spec.public;
        w.next_address += 1;
        let node = SimNode {
            node_id: req.node_id.clone(),
            cloud_id: req.cloud_id.clone(),
            deployment_id: req.deployment_id.clone(),
            underlay_address: Ipv4Addr::from(UNDERLAY_BASE + w.next_address),
            roles: req.roles.clone(),
            public,
            agent_state: AgentState::Down,
            ready_at: now + latency,
            units: Vec::new(),
        };
        w.record(
            now,
            "provision",
            &req.node_id,
            json!({"cloud": req.cloud_id, "address": node.underlay_address, "ready_at": node.ready_at}),
        );
        let ready_at = node.ready_at;
        w.nodes.insert(req.node_id.clone(), node);
        Ok(ready_at)
    }

    pub fn agent_boot_latency(&self) -> Tick {
        self.world.lock().scenario.agent_boot_latency
    }

    pub fn image_latency(&self, image_ref: &str) -> Tick {
        self.world.lock().scenario.image_latency(image_ref)
    }

    pub fn barrier_timeout(&self) -> Tick {
        self.world.lock().scenario.barrier_timeout
    }

    /// Brings the node agent up and publishes the node's roles under
    /// `deploy/<deployment>/nodes/<node>/roles`.
    pub fn boot_agent(&self, node_id: &str) -> Result<(), HarnessError> {
        let now = self.clock.now();
        let mut w = self.world.lock();
        let node = w
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| HarnessError::UnknownNode(node_id.to_string()))?;
        if node.ready_at > now {
            return Err(HarnessError::NotProvisioned(node_id.to_string()));
        }
        if node.agent_state == AgentState::Up {
            return Err(HarnessError::AlreadyUp(node_id.to_string()));
        }
        node.agent_state = AgentState::Up;
        let roles: Vec<String> = node.roles.iter().cloned().collect();
        let dep = node.deployment_id.clone();
        if let Some(store) = &w.store {
            let key = StateKey::from_segments(["deploy", dep.as_str(), "nodes", node_id, "roles"]);
            match key {
                Ok(k) => {
                    let value = serde_json::to_vec(&roles).expect("roles serialise");
                    if let Err(e) = store.put(&k, value, None) {
                        log::warn!("discovery key for {node_id} not written: {e}");
                    }
                }
                Err(e) => log::warn!("no discovery key for {node_id}: {e}"),
            }
        }
        w.record(now, "agent.up", node_id, json!({"roles": roles}));
        Ok(())
    }

    /// Starts an execution unit. Fault-marked nodes produce a FAILED unit.
    pub fn run_unit(
        &self,
        node_id: &str,
        spec: &LaunchSpec,
        owner_instance: &str,
    ) -> Result<ExecUnit, HarnessError> {
        let now = self.clock.now();
        let mut w = self.world.lock();
        let latency = w.scenario.image_latency(&spec.image_ref);
        let agent = w
            .nodes
            .get(node_id)
            .ok_or_else(|| HarnessError::UnknownNode(node_id.to_string()))?
            .agent_state;
        if agent != AgentState::Up {
            return Err(HarnessError::AgentDown(node_id.to_string()));
        }
        let faulty = w.take_fault(|t| matches!(t, FaultTarget::Node(n) if n == node_id));
        w.next_unit += 1;
        let unit = ExecUnit {
            unit_id: format!("u{}", w.next_unit),
            image_ref: spec.image_ref.clone(),
            state: if faulty {
                UnitState::Failed
            } else {
                UnitState::Running
            },
            owner_instance: owner_instance.to_string(),
            ready_at: now + latency,
        };
        w.record(
            now,
            if faulty { "unit.failed" } else { "unit.run" },
            node_id,
            json!({"unit": unit.unit_id, "image": unit.image_ref, "owner": owner_instance}),
        );
        w.nodes
            .get_mut(node_id)
            .expect("checked above")
            .units
            .push(unit.clone());
        if faulty {
            return Err(HarnessError::LaunchFault {
                node_id: node_id.to_string(),
                unit_id: unit.unit_id,
            });
        }
        Ok(unit)
    }

    pub fn stop_unit(&self, node_id: &str, unit_id: &str) -> Result<(), HarnessError> {
        let now = self.clock.now();
        let mut w = self.world.lock();
        let node = w
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| HarnessError::UnknownNode(node_id.to_string()))?;
        let unit = node
            .units
            .iter_mut()
            .find(|u| u.unit_id == unit_id)
            .ok_or_else(|| HarnessError::UnknownUnit(unit_id.to_string()))?;
        unit.state = UnitState::Stopped;
        w.record(now, "unit.stop", node_id, json!({"unit": unit_id}));
        Ok(())
    }

    /// Arms a fault. Node and cloud targets must exist.
    pub fn inject_fault(&self, target: FaultTarget, mode: FaultMode) -> Result<(), HarnessError> {
        let now = self.clock.now();
        let mut w = self.world.lock();
        let known = match &target {
            FaultTarget::Node(n) => w.nodes.contains_key(n),
            FaultTarget::Cloud(c) => w.clouds.contains_key(c),
            FaultTarget::Step { .. } => true,
        };
        if !known {
            return Err(HarnessError::UnknownTarget(target));
        }
        let detail = json!({"target": target, "mode": mode});
        w.faults.push((target, mode));
        w.record(now, "fault.inject", "", detail);
        Ok(())
    }

    pub fn clear_fault(&self, target: &FaultTarget) {
        let now = self.clock.now();
        let mut w = self.world.lock();
        w.faults.retain(|(t, _)| t != target);
        w.record(now, "fault.clear", "", json!({"target": target}));
    }

    /// Whether a step of `kind` on `target` should fail now.
    pub fn take_step_fault(&self, kind: StepKind, target: &str) -> bool {
        self.world.lock().take_fault(|t| match t {
            FaultTarget::Step { kind: k, target: None } => *k == kind,
            FaultTarget::Step {
                kind: k,
                target: Some(x),
            } => *k == kind && x == target,
            _ => false,
        })
    }

    pub fn node(&self, node_id: &str) -> Option<SimNode> {
        self.world.lock().nodes.get(node_id).cloned()
    }

    pub fn nodes(&self) -> Vec<SimNode> {
        self.world.lock().nodes.values().cloned().collect()
    }

    pub fn node_count(&self) -> usize {
        self.world.lock().nodes.len()
    }

    pub fn nodes_in_cloud(&self, cloud_id: &str) -> usize {
        self.world
            .lock()
            .nodes
            .values()
            .filter(|n| n.cloud_id == cloud_id)
            .count()
    }

    pub fn register_overlay(&self, overlay: OverlayNetwork) {
        let now = self.clock.now();
        let mut w = self.world.lock();
        w.record(
            now,
            "overlay.register",
            &overlay.network_id,
            json!({"members": overlay.members.len()}),
        );
        w.overlays.insert(overlay.deployment_id.clone(), overlay);
    }

    pub fn overlay(&self, deployment_id: &str) -> Option<OverlayNetwork> {
        self.world.lock().overlays.get(deployment_id).cloned()
    }

    pub fn set_firewall(&self, node_id: &str, policy: FirewallPolicy) {
        let now = self.clock.now();
        let mut w = self.world.lock();
        w.record(now, "firewall.set", node_id, json!({"policy": policy.policy_id()}));
        w.firewalls.insert(node_id.to_string(), policy);
    }

    pub fn firewall(&self, node_id: &str) -> Option<FirewallPolicy> {
        self.world.lock().firewalls.get(node_id).cloned()
    }

    /// Routes a probe packet.
    ///
    /// Underlay addresses are reachable within one deployment or between
    /// public nodes. Anything else is treated as an overlay address.
    pub fn send(&self, packet: &SimPacket) -> SendResult {
        let w = self.world.lock();
        let src_id = packet.src_node.clone();
        let Some(src) = w.nodes.get(&src_id) else {
            return SendResult::blocked(BlockReason::UnknownSource, vec![src_id]);
        };
        let Some(dst) = w.node_by_address(packet.dst_address) else {
            return overlay::route(packet, w.overlays.values(), |n| w.firewalls.get(n));
        };
        if dst.node_id == src.node_id {
            return SendResult::delivered(vec![src_id]);
        }
        if !World::underlay_reachable(src, dst) {
            return SendResult::blocked(BlockReason::Isolated, vec![src_id]);
        }
        let flow = Flow {
            src: src.underlay_address,
            dst: dst.underlay_address,
            protocol: packet.protocol,
            dst_port: packet.dst_port,
        };
        if let Some(r) = overlay::check_firewalls(&flow, &src.node_id, &dst.node_id, |n| w.firewalls.get(n)) {
            return SendResult::blocked(r, vec![src_id]);
        }
        SendResult::delivered(vec![src_id, dst.node_id.clone()])
    }

    pub(crate) fn overlay_deliver(&self, packet: &SimPacket) -> SendResult {
        let w = self.world.lock();
        if !w.nodes.contains_key(&packet.src_node) {
            return SendResult::blocked(BlockReason::UnknownSource, vec![packet.src_node.clone()]);
        }
        overlay::route(packet, w.overlays.values(), |n| w.firewalls.get(n))
    }

    /// Whether the reachability layer has a direct link between two nodes:
    /// an underlay path, or a client to server spoke of a shared overlay.
    pub fn link_exists(&self, a: &str, b: &str) -> bool {
        let w = self.world.lock();
        let (Some(na), Some(nb)) = (w.nodes.get(a), w.nodes.get(b)) else {
            return false;
        };
        if World::underlay_reachable(na, nb) {
            return true;
        }
        w.overlays.values().any(|o| {
            let (Some(ma), Some(mb)) = (o.member(a), o.member(b)) else {
                return false;
            };
            let server = &o.server().node_id;
            *server == ma.node_id || *server == mb.node_id
        })
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.world.lock().trace.clone()
    }

    /// The trace as newline-delimited JSON.
    pub fn trace_ndjson(&self) -> String {
        let mut out = String::new();
        for ev in self.world.lock().trace.iter() {
            out.push_str(&serde_json::to_string(ev).expect("trace events serialise"));
            out.push('\n');
        }
        out
    }
}

impl NodeDriver for Harness {
    fn has_node(&self, node_id: &str) -> bool {
        self.world.lock().nodes.contains_key(node_id)
    }

    fn node_deployment(&self, node_id: &str) -> Option<String> {
        self.world
            .lock()
            .nodes
            .get(node_id)
            .map(|n| n.deployment_id.clone())
    }

    fn node_address(&self, node_id: &str) -> Option<Ipv4Addr> {
        self.world
            .lock()
            .nodes
            .get(node_id)
            .map(|n| n.underlay_address)
    }

    fn launch(
        &self,
        node_id: &str,
        spec: &LaunchSpec,
        owner_instance: &str,
    ) -> Result<LaunchedUnit, String> {
        self.run_unit(node_id, spec, owner_instance)
            .map(|u| LaunchedUnit {
                unit_id: u.unit_id,
                ready_at: u.ready_at,
            })
            .map_err(|e| e.to_string())
    }

    fn stop_unit(&self, node_id: &str, unit_id: &str) {
        if let Err(e) = Harness::stop_unit(self, node_id, unit_id) {
            log::warn!("stopping {unit_id} on {node_id}: {e}");
        }
    }
}
