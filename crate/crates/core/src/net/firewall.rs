//! First-match firewall policies.
//!
//! Rules are kept sorted by ascending priority; the first rule whose
//! direction, protocol, source/destination CIDR and destination port range
//! all match decides. Otherwise the direction's default action applies.

use std::fmt;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    In,
    Out,
}

/// Transport protocol of a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    Tcp,
    Udp,
}

/// Protocol selector of a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleProtocol {
    Tcp,
    Udp,
    Any,
}

impl RuleProtocol {
    pub fn matches(self, p: Protocol) -> bool {
        matches!(
            (self, p),
            (RuleProtocol::Any, _)
                | (RuleProtocol::Tcp, Protocol::Tcp)
                | (RuleProtocol::Udp, Protocol::Udp)
        )
    }
}

/// Inclusive destination port range, serialised as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(u16, u16)", into = "(u16, u16)")]
pub struct PortRange {
    pub lo: u16,
    pub hi: u16,
}

impl PortRange {
    pub const ANY: PortRange = PortRange { lo: 0, hi: u16::MAX };

    pub const fn new(lo: u16, hi: u16) -> Self {
        Self { lo, hi }
    }

    pub const fn single(port: u16) -> Self {
        Self { lo: port, hi: port }
    }

    pub fn contains(&self, port: u16) -> bool {
        self.lo <= port && port <= self.hi
    }
}

impl From<(u16, u16)> for PortRange {
    fn from((lo, hi): (u16, u16)) -> Self {
        Self { lo, hi }
    }
}

impl From<PortRange> for (u16, u16) {
    fn from(r: PortRange) -> Self {
        (r.lo, r.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirewallRule {
    pub priority: u32,
    pub direction: Direction,
    pub protocol: RuleProtocol,
    pub src_cidr: Ipv4Net,
    pub dst_cidr: Ipv4Net,
    pub dst_port_range: PortRange,
    pub action: Action,
}

impl FirewallRule {
    pub fn matches(&self, flow: &Flow, direction: Direction) -> bool {
        self.direction == direction
            && self.protocol.matches(flow.protocol)
            && self.src_cidr.contains(&flow.src)
            && self.dst_cidr.contains(&flow.dst)
            && self.dst_port_range.contains(flow.dst_port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FirewallError {
    #[error("duplicate rule priority {0}")]
    DuplicatePriority(u32),
    #[error("port range [{lo}, {hi}] is inverted")]
    InvalidPortRange { lo: u16, hi: u16 },
}

#[derive(Deserialize)]
struct RawPolicy {
    policy_id: String,
    #[serde(default = "default_inbound")]
    default_inbound: Action,
    #[serde(default = "default_outbound")]
    default_outbound: Action,
    #[serde(default)]
    rules: Vec<FirewallRule>,
}

fn default_inbound() -> Action {
    Action::Deny
}

fn default_outbound() -> Action {
    Action::Allow
}

/// An ordered rule set with per-direction defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct FirewallPolicy {
    policy_id: String,
    default_inbound: Action,
    default_outbound: Action,
    rules: Vec<FirewallRule>,
}

impl TryFrom<RawPolicy> for FirewallPolicy {
    type Error = FirewallError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        Self::new(
            raw.policy_id,
            raw.default_inbound,
            raw.default_outbound,
            raw.rules,
        )
    }
}

impl FirewallPolicy {
    pub fn new(
        policy_id: impl Into<String>,
        default_inbound: Action,
        default_outbound: Action,
        mut rules: Vec<FirewallRule>,
    ) -> Result<Self, FirewallError> {
        for r in &rules {
            if r.dst_port_range.lo > r.dst_port_range.hi {
                return Err(FirewallError::InvalidPortRange {
                    lo: r.dst_port_range.lo,
                    hi: r.dst_port_range.hi,
                });
            }
        }
        rules.sort_by_key(|r| r.priority);
        if let Some(w) = rules.windows(2).find(|w| w[0].priority == w[1].priority) {
            return Err(FirewallError::DuplicatePriority(w[0].priority));
        }
        Ok(Self {
            policy_id: policy_id.into(),
            default_inbound,
            default_outbound,
            rules,
        })
    }

    /// Inbound DENY, outbound ALLOW, no rules.
    pub fn with_defaults(policy_id: impl Into<String>) -> Self {
        Self::new(policy_id, Action::Deny, Action::Allow, Vec::new()).expect("no rules")
    }

    pub fn policy_id(&self) -> &str {
        &self.policy_id
    }

    pub fn rules(&self) -> &[FirewallRule] {
        &self.rules
    }

    pub fn default_for(&self, direction: Direction) -> Action {
        match direction {
            Direction::In => self.default_inbound,
            Direction::Out => self.default_outbound,
        }
    }

    pub fn evaluate(&self, flow: &Flow, direction: Direction) -> Verdict {
        fw_evaluate(self, flow, direction)
    }
}

/// The addressing tuple a policy looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flow {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub protocol: Protocol,
    pub dst_port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedBy {
    /// The deciding rule, identified by its priority.
    Rule(u32),
    Default,
}

impl fmt::Display for MatchedBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchedBy::Rule(p) => write!(f, "rule {p}"),
            MatchedBy::Default => f.write_str("DEFAULT"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub action: Action,
    pub matched_by: MatchedBy,
}

pub fn fw_evaluate(policy: &FirewallPolicy, flow: &Flow, direction: Direction) -> Verdict {
    policy
        .rules
        .iter()
        .find(|r| r.matches(flow, direction))
        .map(|r| Verdict {
            action: r.action,
            matched_by: MatchedBy::Rule(r.priority),
        })
        .unwrap_or(Verdict {
            action: policy.default_for(direction),
            matched_by: MatchedBy::Default,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any_net() -> Ipv4Net {
        "0.0.0.0/0".parse().unwrap()
    }

    fn rule(priority: u32, protocol: RuleProtocol, ports: PortRange, action: Action) -> FirewallRule {
        FirewallRule {
            priority,
            direction: Direction::In,
            protocol,
            src_cidr: any_net(),
            dst_cidr: any_net(),
            dst_port_range: ports,
            action,
        }
    }

    fn ssh() -> Flow {
        Flow {
            src: "10.8.0.2".parse().unwrap(),
            dst: "10.8.0.1".parse().unwrap(),
            protocol: Protocol::Tcp,
            dst_port: 22,
        }
    }

    /// Scans every rule in ascending priority by hand.
    fn oracle(policy: &FirewallPolicy, flow: &Flow, dir: Direction) -> (Action, Option<u32>) {
        let mut sorted: Vec<_> = policy.rules().to_vec();
        sorted.sort_by_key(|r| r.priority);
        for r in sorted {
            let proto_ok = match r.protocol {
                RuleProtocol::Any => true,
                RuleProtocol::Tcp => flow.protocol == Protocol::Tcp,
                RuleProtocol::Udp => flow.protocol == Protocol::Udp,
            };
            if r.direction == dir
                && proto_ok
                && r.src_cidr.contains(&flow.src)
                && r.dst_cidr.contains(&flow.dst)
                && flow.dst_port >= r.dst_port_range.lo
                && flow.dst_port <= r.dst_port_range.hi
            {
                return (r.action, Some(r.priority));
            }
        }
        (policy.default_for(dir), None)
    }

    #[test]
    fn empty_policy_uses_default() {
        let p = FirewallPolicy::with_defaults("p");
        let v = p.evaluate(&ssh(), Direction::In);
        assert_eq!(v.action, Action::Deny);
        assert_eq!(v.matched_by, MatchedBy::Default);
        assert_eq!(p.evaluate(&ssh(), Direction::Out).action, Action::Allow);
    }

    #[test]
    fn first_match_wins_and_order_matters() {
        let deny_ssh = rule(1, RuleProtocol::Tcp, PortRange::single(22), Action::Deny);
        let allow_all = rule(2, RuleProtocol::Any, PortRange::ANY, Action::Allow);
        let p = FirewallPolicy::new("p", Action::Deny, Action::Allow, vec![allow_all.clone(), deny_ssh.clone()])
            .unwrap();
        let v = p.evaluate(&ssh(), Direction::In);
        assert_eq!((v.action, v.matched_by), (Action::Deny, MatchedBy::Rule(1)));
        assert_eq!(oracle(&p, &ssh(), Direction::In), (Action::Deny, Some(1)));

        // Swap priorities.
        let swapped = vec![
            FirewallRule { priority: 2, ..deny_ssh },
            FirewallRule { priority: 1, ..allow_all },
        ];
        let p = FirewallPolicy::new("p", Action::Deny, Action::Allow, swapped).unwrap();
        let v = p.evaluate(&ssh(), Direction::In);
        assert_eq!((v.action, v.matched_by), (Action::Allow, MatchedBy::Rule(1)));
        assert_eq!(oracle(&p, &ssh(), Direction::In), (Action::Allow, Some(1)));
    }

    #[test]
    fn invariants_are_checked() {
        let a = rule(5, RuleProtocol::Any, PortRange::ANY, Action::Allow);
        assert_eq!(
            FirewallPolicy::new("p", Action::Deny, Action::Allow, vec![a.clone(), a.clone()]),
            Err(FirewallError::DuplicatePriority(5))
        );
        let bad = rule(1, RuleProtocol::Any, PortRange::new(10, 9), Action::Allow);
        assert!(matches!(
            FirewallPolicy::new("p", Action::Deny, Action::Allow, vec![bad]),
            Err(FirewallError::InvalidPortRange { .. })
        ));
    }

    #[test]
    fn rules_are_sorted_by_priority() {
        let rules = vec![
            rule(30, RuleProtocol::Any, PortRange::ANY, Action::Allow),
            rule(10, RuleProtocol::Any, PortRange::ANY, Action::Allow),
            rule(20, RuleProtocol::Any, PortRange::ANY, Action::Allow),
        ];
        let p = FirewallPolicy::new("p", Action::Deny, Action::Allow, rules).unwrap();
        let order: Vec<u32> = p.rules().iter().map(|r| r.priority).collect();
        assert_eq!(order, vec![10, 20, 30]);
    }

    #[test]
    fn json_form() {
        let p: FirewallPolicy = serde_json::from_value(serde_json::json!({
            "policy_id": "web",
            "rules": [{
                "priority": 1, "direction": "IN", "protocol": "TCP",
                "src_cidr": "0.0.0.0/0", "dst_cidr": "10.8.0.0/24",
                "dst_port_range": [443, 443], "action": "ALLOW"
            }]
        }))
        .unwrap();
        assert_eq!(p.default_for(Direction::In), Action::Deny);
        assert_eq!(p.default_for(Direction::Out), Action::Allow);
        let mut flow = ssh();
        flow.dst_port = 443;
        assert_eq!(p.evaluate(&flow, Direction::In).matched_by, MatchedBy::Rule(1));
        let dup = serde_json::json!({
            "policy_id": "x",
            "rules": [
                {"priority": 1, "direction": "IN", "protocol": "ANY", "src_cidr": "0.0.0.0/0",
                 "dst_cidr": "0.0.0.0/0", "dst_port_range": [0, 1], "action": "ALLOW"},
                {"priority": 1, "direction": "IN", "protocol": "ANY", "src_cidr": "0.0.0.0/0",
                 "dst_cidr": "0.0.0.0/0", "dst_port_range": [0, 1], "action": "ALLOW"}
            ]
        });
        assert!(serde_json::from_value::<FirewallPolicy>(dup).is_err());
    }
}
