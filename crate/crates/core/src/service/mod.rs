//! Service descriptors, instances and the lifecycle framework.
//!
//! The framework keeps no state of its own: registry entries and instance
//! records live in the state store, so a fresh [`ServiceFramework`] over a
//! restored store answers every query the same way.
//!
//! Store layout:
//!
//! ```text
//! registry/services/<service_id>                 descriptor JSON
//! deploy/<dep>/instances/<instance_id>           instance JSON
//! deploy/<dep>/services/<SERVICE_TYPE>/status    lifecycle state name
//! index/instances/<instance_id>                  owning deployment id
//! ```

mod auditor;
mod descriptor;
mod lifecycle;

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::sync::Arc;

use parking_lot::{Mutex, ReentrantMutex, RwLock};
use serde_json::json;
use thiserror::Error;

use crate::bus::MessageBus;
use crate::clock::Tick;
use crate::store::{StateEntry, StateKey, StateStore, StoreError};

pub use auditor::{Transition, TransitionAuditor};
pub use descriptor::{Endpoint, LaunchSpec, ServiceDescriptor, ServiceInstance, ServiceType};
pub use lifecycle::LifecycleState;

pub const REGISTRY_TOPIC: &str = "registry/events";

/// Where execution units run. The simulation harness implements this; a
/// real backend would talk to node agents.
pub trait NodeDriver: Send + Sync {
    fn has_node(&self, node_id: &str) -> bool;
    fn node_deployment(&self, node_id: &str) -> Option<String>;
    fn node_address(&self, node_id: &str) -> Option<Ipv4Addr>;
    fn launch(
        &self,
        node_id: &str,
        spec: &LaunchSpec,
        owner_instance: &str,
    ) -> Result<LaunchedUnit, String>;
    fn stop_unit(&self, node_id: &str, unit_id: &str);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchedUnit {
    pub unit_id: String,
    pub ready_at: Tick,
}

/// Service-specific hooks run around lifecycle changes.
pub trait ManagementLogic: Send + Sync {
    fn on_deploy(&self, _instance: &ServiceInstance) -> Result<(), String> {
        Ok(())
    }
    fn on_start(&self, _instance: &ServiceInstance) -> Result<(), String> {
        Ok(())
    }
    fn on_stop(&self, _instance: &ServiceInstance) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("launch failed on node {node_id} for {instance_id}: {reason}")]
pub struct LaunchFailure {
    pub node_id: String,
    pub instance_id: String,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("service {0} is already registered")]
    DuplicateService(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("placement spans deployments {0} and {1}")]
    MixedDeployments(String, String),
    #[error("empty placement")]
    EmptyPlacement,
    #[error(transparent)]
    LaunchFailure(#[from] LaunchFailure),
    #[error("illegal transition from {from} to {requested}")]
    IllegalTransition {
        from: LifecycleState,
        requested: LifecycleState,
    },
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("parent {parent} is {state}, not READY or RUNNING")]
    ParentNotActive {
        parent: String,
        state: LifecycleState,
    },
    #[error("management logic failed: {0}")]
    ManagementLogic(String),
    #[error("corrupt record at {0}")]
    Corrupt(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Result of a deploy call. Per-node launch failures do not abort the call;
/// they are reported alongside the instances.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeployOutcome {
    /// One instance per placement node, in placement order.
    pub instances: Vec<ServiceInstance>,
    /// Instances launched recursively by COMPOSITE services.
    pub children: Vec<ServiceInstance>,
    pub failures: Vec<LaunchFailure>,
}

impl DeployOutcome {
    pub fn all_ready(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn into_result(self) -> Result<Vec<ServiceInstance>, ServiceError> {
        match self.failures.into_iter().next() {
            Some(f) => Err(f.into()),
            None => Ok(self.instances),
        }
    }
}

pub fn registry_key(service_id: &str) -> Result<StateKey, StoreError> {
    Ok(StateKey::from_segments(["registry", "services", service_id])?)
}

pub fn instance_key(deployment_id: &str, instance_id: &str) -> Result<StateKey, StoreError> {
    Ok(StateKey::from_segments(["deploy", deployment_id, "instances", instance_id])?)
}

pub fn status_key(deployment_id: &str, service_type: ServiceType) -> Result<StateKey, StoreError> {
    Ok(StateKey::from_segments([
        "deploy",
        deployment_id,
        "services",
        service_type.as_str(),
        "status",
    ])?)
}

fn index_key(instance_id: &str) -> Result<StateKey, StoreError> {
    Ok(StateKey::from_segments(["index", "instances", instance_id])?)
}

struct Inner {
    store: StateStore,
    bus: MessageBus,
    driver: Arc<dyn NodeDriver>,
    logic: RwLock<HashMap<String, Arc<dyn ManagementLogic>>>,
    locks: Mutex<HashMap<String, Arc<ReentrantMutex<()>>>>,
}

#[derive(Clone)]
pub struct ServiceFramework {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for ServiceFramework {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceFramework").finish_non_exhaustive()
    }
}

impl ServiceFramework {
    pub fn new(store: StateStore, bus: MessageBus, driver: Arc<dyn NodeDriver>) -> Self {
        Self {
            inner: Arc::new(Inner {
                store,
                bus,
                driver,
                logic: RwLock::new(HashMap::new()),
                locks: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn store(&self) -> &StateStore {
        &self.inner.store
    }

    pub fn driver(&self) -> &Arc<dyn NodeDriver> {
        &self.inner.driver
    }

    pub fn set_logic(&self, service_id: &str, logic: Arc<dyn ManagementLogic>) {
        self.inner.logic.write().insert(service_id.to_string(), logic);
    }

    fn logic(&self, service_id: &str) -> Option<Arc<dyn ManagementLogic>> {
        self.inner.logic.read().get(service_id).cloned()
    }

    fn deployment_lock(&self, deployment_id: &str) -> Arc<ReentrantMutex<()>> {
        self.inner
            .locks
            .lock()
            .entry(deployment_id.to_string())
            .or_default()
            .clone()
    }

    pub fn register(&self, descriptor: &ServiceDescriptor) -> Result<String, ServiceError> {
        descriptor.validate().map_err(ServiceError::InvalidDescriptor)?;
        let key = registry_key(&descriptor.service_id)?;
        let value = serde_json::to_vec(descriptor).expect("descriptor serialises");
        match self.inner.store.put(&key, value, Some(0)) {
            Ok(_) => {}
            Err(StoreError::VersionConflict { .. }) => {
                return Err(ServiceError::DuplicateService(descriptor.service_id.clone()))
            }
            Err(e) => return Err(e.into()),
        }
        let event = json!({"event": "registered", "service_id": descriptor.service_id});
        if let Err(e) = self.inner.bus.publish_event(REGISTRY_TOPIC, "service-framework", event) {
            log::warn!("registry event for {} not published: {e}", descriptor.service_id);
        }
        Ok(descriptor.service_id.clone())
    }

    pub fn descriptor(&self, service_id: &str) -> Result<ServiceDescriptor, ServiceError> {
        let key = registry_key(service_id)
            .map_err(|_| ServiceError::UnknownService(service_id.to_string()))?;
        let entry = self
            .inner
            .store
            .get(&key)
            .ok_or_else(|| ServiceError::UnknownService(service_id.to_string()))?;
        serde_json::from_slice(&entry.value).map_err(|_| ServiceError::Corrupt(key.render()))
    }

    /// Registered descriptors in id order.
    pub fn services(&self) -> Result<Vec<ServiceDescriptor>, ServiceError> {
        let prefix = StateKey::parse("registry/services").expect("static key");
        self.inner
            .store
            .list(&prefix)
            .into_iter()
            .map(|e| {
                serde_json::from_slice(&e.value).map_err(|_| ServiceError::Corrupt(e.key.render()))
            })
            .collect()
    }

    pub fn status(&self, instance_id: &str) -> Result<ServiceInstance, ServiceError> {
        let unknown = || ServiceError::UnknownInstance(instance_id.to_string());
        let idx = index_key(instance_id).map_err(|_| unknown())?;
        let dep = self.inner.store.get(&idx).ok_or_else(unknown)?;
        let dep = String::from_utf8(dep.value).map_err(|_| ServiceError::Corrupt(idx.render()))?;
        let key = instance_key(&dep, instance_id)?;
        let entry = self.inner.store.get(&key).ok_or_else(unknown)?;
        serde_json::from_slice(&entry.value).map_err(|_| ServiceError::Corrupt(key.render()))
    }

    /// Instance records of one deployment in key order.
    pub fn instances(&self, deployment_id: &str) -> Result<Vec<ServiceInstance>, ServiceError> {
        let prefix = StateKey::from_segments(["deploy", deployment_id, "instances"])
            .map_err(StoreError::from)?;
        self.inner
            .store
            .list(&prefix)
            .into_iter()
            .map(|e| {
                serde_json::from_slice(&e.value).map_err(|_| ServiceError::Corrupt(e.key.render()))
            })
            .collect()
    }

    pub fn set_service_status(
        &self,
        deployment_id: &str,
        service_type: ServiceType,
        state: LifecycleState,
    ) -> Result<StateEntry, ServiceError> {
        let key = status_key(deployment_id, service_type)?;
        Ok(self.inner.store.put(&key, state.as_str(), None)?)
    }

    pub fn service_status(
        &self,
        deployment_id: &str,
        service_type: ServiceType,
    ) -> Option<LifecycleState> {
        let key = status_key(deployment_id, service_type).ok()?;
        self.inner.store.get(&key)?.value_str()?.parse().ok()
    }

    fn persist(&self, inst: &ServiceInstance) -> Result<(), ServiceError> {
        let key = instance_key(&inst.deployment_id, &inst.instance_id)?;
        let value = serde_json::to_vec(inst).expect("instance serialises");
        self.inner.store.put(&key, value, None)?;
        Ok(())
    }

    fn transition(&self, inst: &mut ServiceInstance, to: LifecycleState) -> Result<(), ServiceError> {
        if !inst.state.can_transition_to(to) {
            return Err(ServiceError::IllegalTransition {
                from: inst.state,
                requested: to,
            });
        }
        log::debug!("{}: {} -> {}", inst.instance_id, inst.state, to);
        inst.state = to;
        self.persist(inst)
    }

    fn placement_deployment(&self, placement: &[String]) -> Result<String, ServiceError> {
        let mut dep: Option<String> = None;
        for node in placement {
            let d = self
                .inner
                .driver
                .node_deployment(node)
                .filter(|_| self.inner.driver.has_node(node))
                .ok_or_else(|| ServiceError::UnknownNode(node.clone()))?;
            match &dep {
                Some(first) if *first != d => {
                    return Err(ServiceError::MixedDeployments(first.clone(), d))
                }
                Some(_) => {}
                None => dep = Some(d),
            }
        }
        dep.ok_or(ServiceError::EmptyPlacement)
    }

    /// Deploys one instance of `service_id` on every placement node.
    ///
    /// Nodes that already hold a READY or RUNNING instance of the service are
    /// left alone, so repeating a deploy creates no duplicate units.
    pub fn deploy(&self, service_id: &str, placement: &[String]) -> Result<DeployOutcome, ServiceError> {
        self.deploy_with_parent(service_id, placement, None)
    }

    fn deploy_with_parent(
        &self,
        service_id: &str,
        placement: &[String],
        parent: Option<&str>,
    ) -> Result<DeployOutcome, ServiceError> {
        let descriptor = self.descriptor(service_id)?;
        let dep = self.placement_deployment(placement)?;
        let lock = self.deployment_lock(&dep);
        let _guard = lock.lock();

        let existing = self.instances(&dep)?;
        let mut out = DeployOutcome::default();
        for node in placement {
            let mine: Vec<&ServiceInstance> = existing
                .iter()
                .filter(|i| i.descriptor_ref == service_id && i.node_id == *node)
                .collect();
            let current = mine
                .iter()
                .rev()
                .find(|i| i.state != LifecycleState::Stopped)
                .map(|i| (*i).clone());
            let mut inst = match current {
                Some(i) if i.state.is_active() => {
                    out.instances.push(i);
                    continue;
                }
                Some(i) => i,
                None => {
                    let generation = mine.len();
                    let instance_id = if generation == 0 {
                        format!("{service_id}.{node}")
                    } else {
                        format!("{service_id}.{node}.g{}", generation + 1)
                    };
                    let inst = ServiceInstance {
                        instance_id,
                        descriptor_ref: service_id.to_string(),
                        deployment_id: dep.clone(),
                        node_id: node.clone(),
                        state: LifecycleState::Registered,
                        endpoints: Vec::new(),
                        parent_instance: parent.map(str::to_string),
                        unit_id: None,
                        retries: 0,
                    };
                    self.inner
                        .store
                        .put(&index_key(&inst.instance_id)?, dep.as_str(), None)?;
                    self.persist(&inst)?;
                    inst
                }
            };
            match self.drive_to_ready(&descriptor, &mut inst)? {
                None => {
                    if descriptor.service_type == ServiceType::Composite {
                        for child in descriptor.children().map_err(ServiceError::InvalidDescriptor)? {
                            let sub = self.launch_subservice(
                                &inst.instance_id,
                                &child,
                                std::slice::from_ref(node),
                            )?;
                            out.children.extend(sub.instances);
                            out.children.extend(sub.children);
                            out.failures.extend(sub.failures);
                        }
                    }
                }
                Some(f) => out.failures.push(f),
            }
            out.instances.push(inst);
        }
        Ok(out)
    }

    /// Drives a REGISTERED, DEPLOYING or FAILED instance to READY, with one
    /// automatic retry after the first failure.
    fn drive_to_ready(
        &self,
        descriptor: &ServiceDescriptor,
        inst: &mut ServiceInstance,
    ) -> Result<Option<LaunchFailure>, ServiceError> {
        loop {
            if inst.state != LifecycleState::Deploying {
                self.transition(inst, LifecycleState::Deploying)?;
            }
            let attempt = match self.logic(&descriptor.service_id) {
                Some(l) => l.on_deploy(inst),
                None => Ok(()),
            }
            .and_then(|()| {
                self.inner
                    .driver
                    .launch(&inst.node_id, &descriptor.launch_spec, &inst.instance_id)
            });
            match attempt {
                Ok(unit) => {
                    let address = self
                        .inner
                        .driver
                        .node_address(&inst.node_id)
                        .unwrap_or(Ipv4Addr::UNSPECIFIED);
                    inst.unit_id = Some(unit.unit_id);
                    inst.endpoints = descriptor
                        .launch_spec
                        .exposed_ports()
                        .into_iter()
                        .map(|(name, port)| Endpoint {
                            name,
                            address,
                            port,
                        })
                        .collect();
                    self.transition(inst, LifecycleState::Ready)?;
                    return Ok(None);
                }
                Err(reason) => {
                    self.transition(inst, LifecycleState::Failed)?;
                    if inst.retries == 0 {
                        inst.retries = 1;
                        continue;
                    }
                    return Ok(Some(LaunchFailure {
                        node_id: inst.node_id.clone(),
                        instance_id: inst.instance_id.clone(),
                        reason,
                    }));
                }
            }
        }
    }

    /// Manual retry of a FAILED instance.
    pub fn retry(&self, instance_id: &str) -> Result<ServiceInstance, ServiceError> {
        let inst = self.status(instance_id)?;
        let lock = self.deployment_lock(&inst.deployment_id);
        let _guard = lock.lock();
        let mut inst = self.status(instance_id)?;
        if inst.state != LifecycleState::Failed {
            return Err(ServiceError::IllegalTransition {
                from: inst.state,
                requested: LifecycleState::Deploying,
            });
        }
        let descriptor = self.descriptor(&inst.descriptor_ref)?;
        match self.drive_to_ready(&descriptor, &mut inst)? {
            None => Ok(inst),
            Some(f) => Err(f.into()),
        }
    }

    pub fn start(&self, instance_id: &str) -> Result<LifecycleState, ServiceError> {
        let inst = self.status(instance_id)?;
        let lock = self.deployment_lock(&inst.deployment_id);
        let _guard = lock.lock();
        let mut inst = self.status(instance_id)?;
        if inst.state != LifecycleState::Ready {
            return Err(ServiceError::IllegalTransition {
                from: inst.state,
                requested: LifecycleState::Running,
            });
        }
        if let Some(l) = self.logic(&inst.descriptor_ref) {
            l.on_start(&inst).map_err(ServiceError::ManagementLogic)?;
        }
        self.transition(&mut inst, LifecycleState::Running)?;
        Ok(inst.state)
    }

    /// Stops an instance after stopping its live children, depth first.
    pub fn stop(&self, instance_id: &str) -> Result<LifecycleState, ServiceError> {
        let inst = self.status(instance_id)?;
        let lock = self.deployment_lock(&inst.deployment_id);
        let _guard = lock.lock();
        let mut inst = self.status(instance_id)?;
        if !inst.state.can_transition_to(LifecycleState::Stopping) {
            return Err(ServiceError::IllegalTransition {
                from: inst.state,
                requested: LifecycleState::Stopping,
            });
        }
        let children: Vec<String> = self
            .instances(&inst.deployment_id)?
            .into_iter()
            .filter(|c| c.parent_instance.as_deref() == Some(instance_id) && c.state.is_active())
            .map(|c| c.instance_id)
            .collect();
        for child in children {
            self.stop(&child)?;
        }
        self.transition(&mut inst, LifecycleState::Stopping)?;
        if let Some(l) = self.logic(&inst.descriptor_ref) {
            if let Err(e) = l.on_stop(&inst) {
                self.transition(&mut inst, LifecycleState::Failed)?;
                return Err(ServiceError::ManagementLogic(e));
            }
        }
        if let Some(unit) = &inst.unit_id {
            self.inner.driver.stop_unit(&inst.node_id, unit);
        }
        self.transition(&mut inst, LifecycleState::Stopped)?;
        Ok(inst.state)
    }

    /// Registers `child` if it is new and deploys it with `parent_instance_id`
    /// as parent.
    pub fn launch_subservice(
        &self,
        parent_instance_id: &str,
        child: &ServiceDescriptor,
        placement: &[String],
    ) -> Result<DeployOutcome, ServiceError> {
        let parent = self.status(parent_instance_id)?;
        if !parent.state.is_active() {
            return Err(ServiceError::ParentNotActive {
                parent: parent_instance_id.to_string(),
                state: parent.state,
            });
        }
        match self.register(child) {
            Ok(_) | Err(ServiceError::DuplicateService(_)) => {}
            Err(e) => return Err(e),
        }
        self.deploy_with_parent(&child.service_id, placement, Some(parent_instance_id))
    }
}
