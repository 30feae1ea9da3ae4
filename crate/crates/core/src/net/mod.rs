//! The VPN overlay, firewall and load-balancer services.
//!
//! Planning and evaluation are pure functions; the `apply_*` functions run a
//! service through the service framework on harness nodes and record the
//! result in the store:
//!
//! ```text
//! deploy/<dep>/vpn        OverlayNetwork JSON
//! deploy/<dep>/firewall   FirewallPolicy JSON
//! deploy/<dep>/lb         LbPool JSON
//! ```

pub mod firewall;
pub mod lb;
pub mod overlay;
pub mod vpn;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::Harness;
use crate::service::{
    DeployOutcome, LaunchFailure, LaunchSpec, LifecycleState, ManagementLogic, ServiceDescriptor,
    ServiceError, ServiceFramework, ServiceInstance, ServiceType,
};
use crate::store::{StateKey, StateStore, StoreError};

use self::firewall::FirewallPolicy;
use self::lb::{Backend, LbAlgorithm, LbError, LbPool};
use self::vpn::{OverlayNetwork, VPN_PORT};

pub const VPN_SERVER_SERVICE: &str = "vpn-server";
pub const VPN_CLIENT_SERVICE: &str = "vpn-client";
pub const FIREWALL_SERVICE: &str = "firewall";
pub const LB_SERVICE: &str = "load-balancer";

pub const VPN_SERVER_IMAGE: &str = "netsmo/vpn-server";
pub const VPN_CLIENT_IMAGE: &str = "netsmo/vpn-client";
pub const FIREWALL_IMAGE: &str = "netsmo/firewall";
pub const LB_IMAGE: &str = "netsmo/lb";

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    LaunchFailure(#[from] LaunchFailure),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Lb(#[from] LbError),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub fn service_record_key(deployment_id: &str, name: &str) -> Result<StateKey, StoreError> {
    Ok(StateKey::from_segments(["deploy", deployment_id, name])?)
}

/// Checks that the deployment's VPN server is up before a client launches.
struct VpnClientLogic {
    store: StateStore,
}

impl ManagementLogic for VpnClientLogic {
    fn on_deploy(&self, instance: &ServiceInstance) -> Result<(), String> {
        let prefix = StateKey::from_segments(["deploy", instance.deployment_id.as_str(), "instances"])
            .map_err(|e| e.to_string())?;
        let server_ready = self.store.list(&prefix).iter().any(|e| {
            serde_json::from_slice::<ServiceInstance>(&e.value).is_ok_and(|i| {
                i.descriptor_ref == VPN_SERVER_SERVICE && i.state.is_active()
            })
        });
        if server_ready {
            Ok(())
        } else {
            Err(format!("no READY VPN server in {}", instance.deployment_id))
        }
    }
}

fn ensure_registered(fw: &ServiceFramework, desc: ServiceDescriptor) -> Result<(), ServiceError> {
    match fw.register(&desc) {
        Ok(_) | Err(ServiceError::DuplicateService(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

fn vpn_descriptors(fw: &ServiceFramework) -> Result<(), ServiceError> {
    let server = ServiceDescriptor::new(
        VPN_SERVER_SERVICE,
        ServiceType::Vpn,
        LaunchSpec::new(VPN_SERVER_IMAGE).with_env("EXPOSE_VPN", VPN_PORT.to_string()),
    );
    let client = ServiceDescriptor::new(
        VPN_CLIENT_SERVICE,
        ServiceType::Vpn,
        LaunchSpec::new(VPN_CLIENT_IMAGE),
    );
    ensure_registered(fw, server)?;
    ensure_registered(fw, client)?;
    fw.set_logic(
        VPN_CLIENT_SERVICE,
        Arc::new(VpnClientLogic {
            store: fw.store().clone(),
        }),
    );
    Ok(())
}

/// Stops every active instance in `outcomes` and marks the service FAILED.
fn roll_back(
    fw: &ServiceFramework,
    deployment_id: &str,
    service_type: ServiceType,
    outcomes: &[&DeployOutcome],
) -> Result<(), ServiceError> {
    for o in outcomes {
        for inst in o.instances.iter().filter(|i| i.state.is_active()) {
            fw.stop(&inst.instance_id)?;
        }
    }
    fw.set_service_status(deployment_id, service_type, LifecycleState::Failed)?;
    Ok(())
}

/// Ticks the VPN takes to come up: server image, then client images.
pub fn vpn_duration(harness: &Harness) -> u64 {
    harness.image_latency(VPN_SERVER_IMAGE) + harness.image_latency(VPN_CLIENT_IMAGE)
}

pub fn firewall_duration(harness: &Harness) -> u64 {
    harness.image_latency(FIREWALL_IMAGE)
}

pub fn lb_duration(harness: &Harness) -> u64 {
    harness.image_latency(LB_IMAGE)
}

/// Launches the overlay's server unit, then its client units.
///
/// Status `deploy/<dep>/services/VPN/status` becomes READY only once every
/// unit is up. On any launch failure the units already started are stopped
/// and the status becomes FAILED. Applying the same overlay again launches
/// nothing new.
pub fn apply_vpn(
    overlay: &OverlayNetwork,
    fw: &ServiceFramework,
    harness: &Harness,
) -> Result<Vec<ServiceInstance>, NetError> {
    let dep = overlay.deployment_id.as_str();
    vpn_descriptors(fw)?;
    fw.set_service_status(dep, ServiceType::Vpn, LifecycleState::Deploying)?;

    let server = overlay.server().node_id.clone();
    let server_out = fw.deploy(VPN_SERVER_SERVICE, std::slice::from_ref(&server))?;
    if let Some(f) = server_out.failures.first().cloned() {
        roll_back(fw, dep, ServiceType::Vpn, &[&server_out])?;
        return Err(f.into());
    }
    let clients: Vec<String> = overlay.clients().map(|m| m.node_id.clone()).collect();
    let client_out = fw.deploy(VPN_CLIENT_SERVICE, &clients)?;
    if let Some(f) = client_out.failures.first().cloned() {
        roll_back(fw, dep, ServiceType::Vpn, &[&server_out, &client_out])?;
        return Err(f.into());
    }

    let mut registered = overlay.clone();
    if let Some(addr) = harness.node(&server).map(|n| n.underlay_address) {
        registered.server_endpoint.address = addr;
    }
    harness.register_overlay(registered.clone());
    let value = serde_json::to_vec(&registered).expect("overlay serialises");
    fw.store().put(&service_record_key(dep, "vpn")?, value, None)?;
    fw.set_service_status(dep, ServiceType::Vpn, LifecycleState::Ready)?;

    let mut all = server_out.instances;
    all.extend(client_out.instances);
    Ok(all)
}

/// Installs `policy` on every node through a firewall unit.
pub fn apply_firewall(
    deployment_id: &str,
    policy: &FirewallPolicy,
    nodes: &[String],
    fw: &ServiceFramework,
    harness: &Harness,
) -> Result<Vec<ServiceInstance>, NetError> {
    ensure_registered(
        fw,
        ServiceDescriptor::new(FIREWALL_SERVICE, ServiceType::Firewall, LaunchSpec::new(FIREWALL_IMAGE)),
    )?;
    fw.set_service_status(deployment_id, ServiceType::Firewall, LifecycleState::Deploying)?;
    let out = fw.deploy(FIREWALL_SERVICE, nodes)?;
    if let Some(f) = out.failures.first().cloned() {
        roll_back(fw, deployment_id, ServiceType::Firewall, &[&out])?;
        return Err(f.into());
    }
    for n in nodes {
        harness.set_firewall(n, policy.clone());
    }
    let value = serde_json::to_vec(policy).expect("policy serialises");
    fw.store()
        .put(&service_record_key(deployment_id, "firewall")?, value, None)?;
    fw.set_service_status(deployment_id, ServiceType::Firewall, LifecycleState::Ready)?;
    Ok(out.instances)
}

/// Load-balancer parameters as given in a recipe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbParams {
    #[serde(default = "default_listen_port")]
    pub listen_port: u16,
    #[serde(default = "default_algorithm")]
    pub algorithm: LbAlgorithm,
    #[serde(default = "default_backend_port")]
    pub backend_port: u16,
}

fn default_listen_port() -> u16 {
    80
}
fn default_algorithm() -> LbAlgorithm {
    LbAlgorithm::RoundRobin
}
fn default_backend_port() -> u16 {
    8080
}

impl Default for LbParams {
    fn default() -> Self {
        Self {
            listen_port: default_listen_port(),
            algorithm: default_algorithm(),
            backend_port: default_backend_port(),
        }
    }
}

/// Runs the balancer unit on the first node and pools all `nodes` as
/// backends.
pub fn apply_lb(
    deployment_id: &str,
    params: &LbParams,
    nodes: &[String],
    fw: &ServiceFramework,
) -> Result<(LbPool, Vec<ServiceInstance>), NetError> {
    let Some(front) = nodes.first() else {
        return Err(NetError::Lb(LbError::NoBackends));
    };
    ensure_registered(
        fw,
        ServiceDescriptor::new(
            LB_SERVICE,
            ServiceType::LoadBalancer,
            LaunchSpec::new(LB_IMAGE).with_env("EXPOSE_HTTP", params.listen_port.to_string()),
        ),
    )?;
    fw.set_service_status(deployment_id, ServiceType::LoadBalancer, LifecycleState::Deploying)?;
    let out = fw.deploy(LB_SERVICE, std::slice::from_ref(front))?;
    if let Some(f) = out.failures.first().cloned() {
        roll_back(fw, deployment_id, ServiceType::LoadBalancer, &[&out])?;
        return Err(f.into());
    }
    let backends = nodes
        .iter()
        .map(|n| Backend::new(n.clone(), params.backend_port))
        .collect();
    let pool = LbPool::new(
        format!("{deployment_id}.lb"),
        params.listen_port,
        params.algorithm,
        backends,
    )?;
    let value = serde_json::to_vec(&pool).expect("pool serialises");
    fw.store()
        .put(&service_record_key(deployment_id, "lb")?, value, None)?;
    fw.set_service_status(deployment_id, ServiceType::LoadBalancer, LifecycleState::Ready)?;
    Ok((pool, out.instances))
}

#[cfg(test)]
mod tests;
