//! Data-plane probes over the simulated reachability layer.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::firewall::{Action, Direction, FirewallPolicy, Flow, MatchedBy, Protocol};
use super::vpn::{OverlayNetwork, VpnRole};
use crate::harness::Harness;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPacket {
    pub src_node: String,
    pub dst_address: Ipv4Addr,
    pub protocol: Protocol,
    pub dst_port: u16,
    #[serde(default)]
    pub size: u32,
}

impl SimPacket {
    pub fn tcp(src_node: impl Into<String>, dst_address: Ipv4Addr, dst_port: u16) -> Self {
        Self {
            src_node: src_node.into(),
            dst_address,
            protocol: Protocol::Tcp,
            dst_port,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum BlockReason {
    /// The address belongs to an overlay the sender is not part of.
    NotAMember,
    NoRoute,
    /// Underlay traffic between different tenants' private networks.
    Isolated,
    Firewall { node_id: String, matched_by: MatchedBy },
    UnknownSource,
}

impl fmt::Display for BlockReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockReason::NotAMember => f.write_str("not-a-member"),
            BlockReason::NoRoute => f.write_str("no-route"),
            BlockReason::Isolated => f.write_str("isolated"),
            BlockReason::Firewall {
                node_id,
                matched_by,
            } => write!(f, "firewall on {node_id} ({matched_by})"),
            BlockReason::UnknownSource => f.write_str("unknown-source"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Delivery {
    Delivered,
    Blocked {
        #[serde(flatten)]
        reason: BlockReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendResult {
    #[serde(flatten)]
    pub delivery: Delivery,
    /// Nodes the packet visited, source first.
    pub hops: Vec<String>,
}

impl SendResult {
    pub fn delivered(hops: Vec<String>) -> Self {
        Self {
            delivery: Delivery::Delivered,
            hops,
        }
    }

    pub fn blocked(reason: BlockReason, hops: Vec<String>) -> Self {
        Self {
            delivery: Delivery::Blocked { reason },
            hops,
        }
    }

    pub fn is_delivered(&self) -> bool {
        self.delivery == Delivery::Delivered
    }

    pub fn block_reason(&self) -> Option<&BlockReason> {
        match &self.delivery {
            Delivery::Blocked { reason } => Some(reason),
            Delivery::Delivered => None,
        }
    }
}

/// Applies the source's outbound and the destination's inbound policy.
pub(crate) fn check_firewalls<'a>(
    flow: &Flow,
    src_node: &str,
    dst_node: &str,
    policy_of: impl Fn(&str) -> Option<&'a FirewallPolicy>,
) -> Option<BlockReason> {
    for (node, dir) in [(src_node, Direction::Out), (dst_node, Direction::In)] {
        if let Some(p) = policy_of(node) {
            let v = p.evaluate(flow, dir);
            if v.action == Action::Deny {
                return Some(BlockReason::Firewall {
                    node_id: node.to_string(),
                    matched_by: v.matched_by,
                });
            }
        }
    }
    None
}

/// Routes a packet addressed to an overlay address.
///
/// Addresses are resolved inside the sender's own overlay only, so two
/// deployments may reuse a subnet without seeing each other. Client to
/// client traffic is relayed by the server.
pub(crate) fn route<'a>(
    packet: &SimPacket,
    overlays: impl Iterator<Item = &'a OverlayNetwork> + Clone,
    policy_of: impl Fn(&str) -> Option<&'a FirewallPolicy>,
) -> SendResult {
    let src = packet.src_node.as_str();
    let own = overlays.clone().find(|o| o.member(src).is_some());
    if let Some(o) = own {
        if let Some(dst) = o.member_by_address(packet.dst_address) {
            let me = o.member(src).expect("found above");
            let server = o.server();
            let hops: Vec<String> = if dst.node_id == src {
                vec![src.to_string()]
            } else if me.role == VpnRole::Server || dst.role == VpnRole::Server {
                vec![src.to_string(), dst.node_id.clone()]
            } else {
                vec![src.to_string(), server.node_id.clone(), dst.node_id.clone()]
            };
            let flow = Flow {
                src: me.overlay_address,
                dst: dst.overlay_address,
                protocol: packet.protocol,
                dst_port: packet.dst_port,
            };
            if let Some(reason) = check_firewalls(&flow, src, &dst.node_id, policy_of) {
                return SendResult::blocked(reason, vec![src.to_string()]);
            }
            return SendResult::delivered(hops);
        }
    }
    let foreign = overlays
        .filter(|o| own.is_none_or(|mine| mine.network_id != o.network_id))
        .any(|o| o.member_by_address(packet.dst_address).is_some());
    let reason = if foreign {
        BlockReason::NotAMember
    } else {
        BlockReason::NoRoute
    };
    SendResult::blocked(reason, vec![src.to_string()])
}

/// Delivers `packet` to an overlay address registered in `harness`.
pub fn overlay_deliver(packet: &SimPacket, harness: &Harness) -> SendResult {
    harness.overlay_deliver(packet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::firewall::{FirewallRule, PortRange, RuleProtocol};
    use crate::net::vpn::{plan_vpn, MemberNode};

    fn overlay(dep: &str, ids: &[&str], subnet: &str) -> OverlayNetwork {
        // The first id is the server.
        let ms: Vec<MemberNode> = ids
            .iter()
            .enumerate()
            .map(|(k, i)| {
                let m = MemberNode::new(*i);
                if k == 0 {
                    m.with_role("server")
                } else {
                    m
                }
            })
            .collect();
        plan_vpn(dep, &ms, Some(subnet.parse().unwrap()), "server").unwrap()
    }

    #[test]
    fn same_subnet_resolution_is_scoped_to_sender() {
        let d1 = overlay("d1", &["a1", "b1", "c1"], "10.8.0.0/24");
        let d2 = overlay("d2", &["a2", "b2"], "10.8.0.0/24");
        let all = [d1.clone(), d2.clone()];
        let none = |_: &str| None;
        // b2 asks for 10.8.0.3: only d1 has it.
        let p = SimPacket::tcp("b2", "10.8.0.3".parse().unwrap(), 80);
        let r = route(&p, all.iter(), none);
        assert_eq!(r.block_reason(), Some(&BlockReason::NotAMember));
        // 10.8.0.2 resolves to b2's own peer, never to b1.
        let p = SimPacket::tcp("a2", "10.8.0.2".parse().unwrap(), 80);
        assert_eq!(route(&p, all.iter(), none).hops, vec!["a2", "b2"]);
        // Non-member sender.
        let p = SimPacket::tcp("stranger", "10.8.0.1".parse().unwrap(), 80);
        assert_eq!(
            route(&p, all.iter(), none).block_reason(),
            Some(&BlockReason::NotAMember)
        );
        let p = SimPacket::tcp("a1", "10.8.0.77".parse().unwrap(), 80);
        assert_eq!(route(&p, all.iter(), none).block_reason(), Some(&BlockReason::NoRoute));
    }

    #[test]
    fn client_to_client_goes_through_server() {
        let o = overlay("d", &["s", "c1", "c2"], "10.8.0.0/24");
        let p = SimPacket::tcp("c1", "10.8.0.3".parse().unwrap(), 80);
        let r = route(&p, std::iter::once(&o), |_| None);
        assert!(r.is_delivered());
        assert_eq!(r.hops, vec!["c1", "s", "c2"]);
    }

    #[test]
    fn destination_firewall_applies() {
        let o = overlay("d", &["s", "c1"], "10.8.0.0/24");
        let deny_ssh = FirewallPolicy::new(
            "fw",
            Action::Allow,
            Action::Allow,
            vec![FirewallRule {
                priority: 1,
                direction: Direction::In,
                protocol: RuleProtocol::Tcp,
                src_cidr: "0.0.0.0/0".parse().unwrap(),
                dst_cidr: "0.0.0.0/0".parse().unwrap(),
                dst_port_range: PortRange::single(22),
                action: Action::Deny,
            }],
        )
        .unwrap();
        let policy_of = |n: &str| (n == "s").then_some(&deny_ssh);
        let ssh = SimPacket::tcp("c1", "10.8.0.1".parse().unwrap(), 22);
        let r = route(&ssh, std::iter::once(&o), policy_of);
        assert_eq!(
            r.block_reason(),
            Some(&BlockReason::Firewall {
                node_id: "s".into(),
                matched_by: MatchedBy::Rule(1)
            })
        );
        let web = SimPacket::tcp("c1", "10.8.0.1".parse().unwrap(), 443);
        assert!(route(&web, std::iter::once(&o), policy_of).is_delivered());
    }

    #[test]
    fn send_result_json() {
        let r = SendResult::blocked(BlockReason::NotAMember, vec!["a".into()]);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["outcome"], "BLOCKED");
        assert_eq!(v["reason"], "not-a-member");
        let d = SendResult::delivered(vec!["a".into(), "b".into()]);
        assert_eq!(serde_json::to_value(&d).unwrap()["outcome"], "DELIVERED");
    }
}
