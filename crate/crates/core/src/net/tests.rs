use std::collections::BTreeSet;

use super::firewall::{Action, Direction, FirewallRule, PortRange, Protocol, RuleProtocol};
use super::overlay::{BlockReason, SimPacket};
use super::vpn::{plan_vpn, MemberNode};
use super::*;
use crate::bus::MessageBus;
use crate::harness::{CloudSpec, FaultMode, FaultTarget, Latency, NodeRequest, Scenario, UnitState};
use crate::service::TransitionAuditor;

fn world(dep: &str, ids: &[&str]) -> (Harness, ServiceFramework) {
    let h = Harness::new(Scenario::new(
        1,
        vec![CloudSpec {
            cloud_id: "c".into(),
            capacity: 16,
            provision_latency: Latency::Fixed(1),
            public: false,
        }],
    ));
    let fw = ServiceFramework::new(
        StateStore::new(h.clock().clone()),
        MessageBus::new(h.clock().clone(), 0),
        Arc::new(h.clone()),
    );
    h.attach_store(fw.store().clone());
    add_nodes(&h, dep, ids);
    (h, fw)
}

fn add_nodes(h: &Harness, dep: &str, ids: &[&str]) {
    for (k, id) in ids.iter().enumerate() {
        let roles: BTreeSet<String> = if k == 0 {
            ["server".to_string()].into()
        } else {
            BTreeSet::new()
        };
        h.provision_node(&NodeRequest {
            node_id: id.to_string(),
            cloud_id: "c".into(),
            deployment_id: dep.into(),
            roles,
            public: false,
        })
        .unwrap();
    }
    let ready = ids.iter().map(|id| h.node(id).unwrap().ready_at).max().unwrap();
    h.clock().advance_to(ready);
    for id in ids {
        h.boot_agent(id).unwrap();
    }
}

fn overlay_for(h: &Harness, dep: &str, ids: &[&str], subnet: &str) -> vpn::OverlayNetwork {
    let members: Vec<MemberNode> = ids
        .iter()
        .map(|id| {
            let n = h.node(id).unwrap();
            MemberNode {
                node_id: n.node_id,
                roles: n.roles,
                underlay_address: Some(n.underlay_address),
            }
        })
        .collect();
    plan_vpn(dep, &members, Some(subnet.parse().unwrap()), "server").unwrap()
}

fn running_units(h: &Harness) -> usize {
    h.nodes()
        .iter()
        .flat_map(|n| &n.units)
        .filter(|u| u.state == UnitState::Running)
        .count()
}

#[test]
fn vpn_three_nodes_comes_up() {
    let (h, fw) = world("d", &["d.s", "d.a", "d.b"]);
    let mut audit = TransitionAuditor::new(fw.store()).unwrap();
    let o = overlay_for(&h, "d", &["d.s", "d.a", "d.b"], "10.8.0.0/24");
    let inst = apply_vpn(&o, &fw, &h).unwrap();
    assert_eq!(inst.len(), 3);
    assert_eq!(running_units(&h), 3);
    assert_eq!(fw.service_status("d", ServiceType::Vpn), Some(LifecycleState::Ready));

    let stored: vpn::OverlayNetwork = serde_json::from_slice(
        &fw.store().get(&service_record_key("d", "vpn").unwrap()).unwrap().value,
    )
    .unwrap();
    assert_eq!(stored.server_endpoint.address, h.node("d.s").unwrap().underlay_address);
    assert_eq!(stored.server().node_id, "d.s");

    // Client a reaches client b through the server.
    let b = stored.member("d.b").unwrap().overlay_address;
    let r = h.send(&SimPacket::tcp("d.a", b, 22));
    assert!(r.is_delivered());
    assert_eq!(r.hops, vec!["d.a", "d.s", "d.b"]);

    // Server instance went READY before any client left REGISTERED.
    audit.poll().unwrap();
    assert!(audit.violations().is_empty());
    let server_ready = audit.position("vpn-server.d.s", LifecycleState::Ready).unwrap();
    let client_deploying = audit.position("vpn-client.d.a", LifecycleState::Deploying).unwrap();
    assert!(server_ready < client_deploying);
}

#[test]
fn vpn_apply_twice_launches_nothing_new() {
    let (h, fw) = world("d", &["d.s", "d.a"]);
    let o = overlay_for(&h, "d", &["d.s", "d.a"], "10.8.0.0/24");
    apply_vpn(&o, &fw, &h).unwrap();
    let before = h.nodes().iter().map(|n| n.units.len()).sum::<usize>();
    apply_vpn(&o, &fw, &h).unwrap();
    let after = h.nodes().iter().map(|n| n.units.len()).sum::<usize>();
    assert_eq!(before, after);
    assert_eq!(fw.instances("d").unwrap().len(), 2);
}

#[test]
fn vpn_client_failure_rolls_back() {
    let (h, fw) = world("d", &["d.s", "d.a", "d.b"]);
    h.inject_fault(FaultTarget::Node("d.b".into()), FaultMode::FailAlways)
        .unwrap();
    let o = overlay_for(&h, "d", &["d.s", "d.a", "d.b"], "10.8.0.0/24");
    let err = apply_vpn(&o, &fw, &h).unwrap_err();
    assert!(matches!(err, NetError::LaunchFailure(ref f) if f.node_id == "d.b"));
    assert_eq!(running_units(&h), 0, "rollback left units running");
    assert_eq!(fw.service_status("d", ServiceType::Vpn), Some(LifecycleState::Failed));
    assert!(h.overlay("d").is_none());
    for i in fw.instances("d").unwrap() {
        assert!(!i.state.is_active(), "{} is {}", i.instance_id, i.state);
    }
}

#[test]
fn vpn_client_refuses_without_server() {
    let (h, fw) = world("d", &["d.s", "d.a"]);
    vpn_descriptors(&fw).unwrap();
    let out = fw.deploy(VPN_CLIENT_SERVICE, &["d.a".to_string()]).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert!(out.failures[0].reason.contains("no READY VPN server"));
    assert_eq!(running_units(&h), 0);
}

#[test]
fn two_overlays_are_isolated() {
    let (h, fw) = world("d1", &["d1.s", "d1.a"]);
    add_nodes(&h, "d2", &["d2.s", "d2.a"]);
    let o1 = overlay_for(&h, "d1", &["d1.s", "d1.a"], "10.8.0.0/24");
    let o2 = overlay_for(&h, "d2", &["d2.s", "d2.a"], "10.9.0.0/24");
    apply_vpn(&o1, &fw, &h).unwrap();
    apply_vpn(&o2, &fw, &h).unwrap();
    let a2 = o2.member("d2.a").unwrap().overlay_address;
    let r = h.send(&SimPacket::tcp("d1.a", a2, 80));
    assert_eq!(r.block_reason(), Some(&BlockReason::NotAMember));
    assert!(!h.link_exists("d1.a", "d2.a"));
    assert!(h.link_exists("d1.a", "d1.s"));
}

#[test]
fn firewall_apply_installs_policy() {
    let (h, fw) = world("d", &["d.s", "d.a"]);
    let policy = FirewallPolicy::new(
        "web-only",
        Action::Deny,
        Action::Allow,
        vec![FirewallRule {
            priority: 10,
            direction: Direction::In,
            protocol: RuleProtocol::Tcp,
            src_cidr: "0.0.0.0/0".parse().unwrap(),
            dst_cidr: "0.0.0.0/0".parse().unwrap(),
            dst_port_range: PortRange::single(80),
            action: Action::Allow,
        }],
    )
    .unwrap();
    let nodes = vec!["d.s".to_string(), "d.a".to_string()];
    let inst = apply_firewall("d", &policy, &nodes, &fw, &h).unwrap();
    assert_eq!(inst.len(), 2);
    assert_eq!(fw.service_status("d", ServiceType::Firewall), Some(LifecycleState::Ready));
    let a = h.node("d.a").unwrap().underlay_address;
    assert!(h.send(&SimPacket::tcp("d.s", a, 80)).is_delivered());
    let mut ssh = SimPacket::tcp("d.s", a, 22);
    assert!(matches!(
        h.send(&ssh).block_reason(),
        Some(BlockReason::Firewall { node_id, .. }) if node_id == "d.a"
    ));
    ssh.protocol = Protocol::Udp;
    ssh.dst_port = 80;
    assert!(!h.send(&ssh).is_delivered(), "rule is TCP only");
}

#[test]
fn lb_apply_builds_pool() {
    let (h, fw) = world("d", &["d.s", "d.a", "d.b"]);
    let nodes: Vec<String> = ["d.s", "d.a", "d.b"].iter().map(|s| s.to_string()).collect();
    let (mut pool, inst) = apply_lb("d", &LbParams::default(), &nodes, &fw).unwrap();
    assert_eq!(inst.len(), 1);
    assert_eq!(inst[0].node_id, "d.s");
    assert_eq!(inst[0].endpoints[0].port, 80);
    assert_eq!(pool.backends().len(), 3);
    let picks: Vec<usize> = (0..4).map(|_| pool.pick().unwrap()).collect();
    assert_eq!(picks, vec![0, 1, 2, 0]);
    assert_eq!(fw.service_status("d", ServiceType::LoadBalancer), Some(LifecycleState::Ready));
    assert!(matches!(
        apply_lb("d", &LbParams::default(), &[], &fw),
        Err(NetError::Lb(lb::LbError::NoBackends))
    ));
    assert_eq!(running_units(&h), 1);
}
