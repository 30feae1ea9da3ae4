//! Hub-and-spoke overlay planning.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bus::Document;

pub const VPN_PORT: u16 = 1194;
pub const DEFAULT_SERVER_ROLE: &str = "server";

pub fn default_subnet() -> Ipv4Net {
    "10.8.0.0/24".parse().expect("static subnet")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VpnRole {
    Server,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayMember {
    pub node_id: String,
    pub role: VpnRole,
    pub overlay_address: Ipv4Addr,
    pub key_material: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerEndpoint {
    pub address: Ipv4Addr,
    pub port: u16,
}

/// A planned overlay. Members are listed server first, then clients in
/// the order they were given to [`plan_vpn`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayNetwork {
    pub network_id: String,
    pub deployment_id: String,
    pub subnet: Ipv4Net,
    pub members: Vec<OverlayMember>,
    pub server_endpoint: ServerEndpoint,
}

impl OverlayNetwork {
    pub fn server(&self) -> &OverlayMember {
        self.members
            .iter()
            .find(|m| m.role == VpnRole::Server)
            .expect("an overlay always has a server")
    }

    pub fn clients(&self) -> impl Iterator<Item = &OverlayMember> {
        self.members.iter().filter(|m| m.role == VpnRole::Client)
    }

    pub fn member(&self, node_id: &str) -> Option<&OverlayMember> {
        self.members.iter().find(|m| m.node_id == node_id)
    }

    pub fn member_by_address(&self, addr: Ipv4Addr) -> Option<&OverlayMember> {
        self.members.iter().find(|m| m.overlay_address == addr)
    }

    /// The configuration document handed to one member's unit.
    pub fn member_config(&self, node_id: &str) -> Option<Document> {
        let m = self.member(node_id)?;
        Some(json!({
            "network_id": self.network_id,
            "role": m.role,
            "overlay_address": m.overlay_address,
            "subnet": self.subnet,
            "server_endpoint": self.server_endpoint,
            "key_material": m.key_material,
        }))
    }
}

/// A node offered to the planner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberNode {
    pub node_id: String,
    pub roles: BTreeSet<String>,
    pub underlay_address: Option<Ipv4Addr>,
}

impl MemberNode {
    pub fn new(node_id: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            roles: BTreeSet::new(),
            underlay_address: None,
        }
    }

    pub fn with_role(mut self, role: &str) -> Self {
        self.roles.insert(role.to_string());
        self
    }

    pub fn with_address(mut self, addr: Ipv4Addr) -> Self {
        self.underlay_address = Some(addr);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanVpnError {
    #[error("an overlay needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("subnet {subnet} has {usable} usable hosts, {needed} needed")]
    SubnetTooSmall {
        subnet: Ipv4Net,
        usable: u64,
        needed: u64,
    },
    #[error("no unique server candidate: {0:?} all carry the server role")]
    NoServerCandidate(Vec<String>),
    #[error("node {0} listed twice")]
    DuplicateMember(String),
}

/// Usable host addresses: network and broadcast excluded, so /31 and /32
/// have none.
pub fn usable_hosts(subnet: &Ipv4Net) -> u64 {
    let size = 1u64 << (32 - subnet.prefix_len());
    size.saturating_sub(2)
}

fn key_material(deployment_id: &str, node_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(deployment_id.as_bytes());
    h.update([0]);
    h.update(node_id.as_bytes());
    hex::encode(h.finalize())
}

/// Plans the overlay for `members`.
///
/// The server is the single node carrying `server_role`, or the
/// lexicographically smallest node id when none does. It receives the
/// first host address of the subnet; clients follow in member order.
pub fn plan_vpn(
    deployment_id: &str,
    members: &[MemberNode],
    subnet: Option<Ipv4Net>,
    server_role: &str,
) -> Result<OverlayNetwork, PlanVpnError> {
    if members.len() < 2 {
        return Err(PlanVpnError::TooFewMembers(members.len()));
    }
    let mut seen = BTreeSet::new();
    for m in members {
        if !seen.insert(m.node_id.as_str()) {
            return Err(PlanVpnError::DuplicateMember(m.node_id.clone()));
        }
    }
    let subnet = subnet.unwrap_or_else(default_subnet).trunc();
    let needed = members.len() as u64 + 1;
    let usable = usable_hosts(&subnet);
    if usable < needed {
        return Err(PlanVpnError::SubnetTooSmall {
            subnet,
            usable,
            needed,
        });
    }

    let tagged: Vec<&MemberNode> = members
        .iter()
        .filter(|m| m.roles.contains(server_role))
        .collect();
    let server = match tagged.as_slice() {
        [one] => *one,
        [] => members
            .iter()
            .min_by(|a, b| a.node_id.cmp(&b.node_id))
            .expect("at least two members"),
        many => {
            return Err(PlanVpnError::NoServerCandidate(
                many.iter().map(|m| m.node_id.clone()).collect(),
            ))
        }
    };

    let base = u32::from(subnet.network());
    let mut out = vec![OverlayMember {
        node_id: server.node_id.clone(),
        role: VpnRole::Server,
        overlay_address: Ipv4Addr::from(base + 1),
        key_material: key_material(deployment_id, &server.node_id),
    }];
    let clients = members.iter().filter(|m| m.node_id != server.node_id);
    for (i, m) in clients.enumerate() {
        out.push(OverlayMember {
            node_id: m.node_id.clone(),
            role: VpnRole::Client,
            overlay_address: Ipv4Addr::from(base + 2 + i as u32),
            key_material: key_material(deployment_id, &m.node_id),
        });
    }
    Ok(OverlayNetwork {
        network_id: format!("{deployment_id}.vpn"),
        deployment_id: deployment_id.to_string(),
        subnet,
        members: out,
        server_endpoint: ServerEndpoint {
            address: server.underlay_address.unwrap_or(Ipv4Addr::UNSPECIFIED),
            port: VPN_PORT,
        },
    })
}
