//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ipnet::Ipv4Net;
use netsmo_core::harness::{Scenario, UnitState};
use netsmo_core::net::firewall::{
    fw_evaluate, Action, Direction, Flow, FirewallPolicy, FirewallRule, MatchedBy, PortRange, Protocol,
    RuleProtocol,
};
use netsmo_core::net::vpn::VpnRole;
use netsmo_core::net::{VPN_CLIENT_IMAGE, VPN_SERVER_IMAGE};
use netsmo_core::recipe::{
    app_id, barrier_id, deploy_id, measure_overhead, netsvc_id, parse_recipe, plan, DeploymentStatus,
};
use netsmo_core::service::{status_key, ServiceType};
use netsmo_core::store::StoreError;
use netsmo_core::{
    Agent, AgentConfig, ApiRequest, Clock, DeploymentRecipe, Document, Envelope, Harness, MessageBus,
    RecipeEngine, SimPacket, StateKey, StateStore, StepKind,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use common::*;

type Criterion = (&'static str, fn() -> String);

fn main() {
    let criteria: [Criterion; 9] = [
        ("reference topology and VPN barrier", reference_topology),
        ("network services add no provisioning overhead", overhead),
        ("overlays isolate deployments", isolation),
        ("client traffic enters through the server", single_entry),
        ("ordering holds on random recipes", ordering),
        ("crash at any step boundary resumes to the same outcome", crash_recovery),
        ("firewall matches the sequential oracle", firewall_oracle),
        ("bus round robin fairness and gapless store versions", fairness_and_versions),
        ("same seed gives identical trace and report", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let ms = t.elapsed().as_millis();
        match result {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail} ({ms} ms)", i + 1),
            Err(p) => {
                failed += 1;
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {} FAIL  {name}: {msg} ({ms} ms)", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn running_images(h: &Harness, image: &str) -> Vec<String> {
    h.nodes()
        .into_iter()
        .flat_map(|n| {
            let id = n.node_id;
            n.units
                .into_iter()
                .filter(|u| u.state == UnitState::Running && u.image_ref == image)
                .map(move |_| id.clone())
        })
        .collect()
}

fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

fn reference_topology() -> String {
    let t = Instant::now();
    let h = Harness::new(reference_scenario());
    let engine = RecipeEngine::standalone(h.clone());
    let report = engine.deploy(&reference_recipe()).unwrap();
    assert_eq!(report.status, DeploymentStatus::Done);

    let servers = running_images(&h, VPN_SERVER_IMAGE);
    let clients = running_images(&h, VPN_CLIENT_IMAGE);
    assert_eq!((servers.len(), clients.len()), (1, 2), "servers {servers:?} clients {clients:?}");
    let clouds: BTreeSet<String> = h.nodes().into_iter().map(|n| n.cloud_id).collect();
    assert_eq!(clouds.len(), 2);

    let overlay = h.overlay("ref").expect("overlay installed");
    assert_eq!(overlay.subnet, "10.8.0.0/24".parse::<Ipv4Net>().unwrap());
    let addrs: BTreeSet<Ipv4Addr> = overlay.members.iter().map(|m| m.overlay_address).collect();
    assert_eq!(addrs, [ip("10.8.0.1"), ip("10.8.0.2"), ip("10.8.0.3")].into());
    assert_eq!(overlay.server().node_id, servers[0]);

    let ready = engine
        .store()
        .get(&status_key("ref", ServiceType::Vpn).unwrap())
        .expect("VPN status written");
    assert_eq!(ready.value, b"READY");
    let mut apps = 0;
    for app in report.steps_of_kind(StepKind::ComponentAppScript) {
        assert!(
            app.start_tick.unwrap() >= ready.written_at,
            "{} started at {:?}, READY at {}",
            app.step_id,
            app.start_tick,
            ready.written_at
        );
        apps += 1;
    }
    let elapsed = t.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    format!("1 server, 2 clients, {{.1,.2,.3}}, {apps} app scripts after READY at tick {}", ready.written_at)
}

/// Longest path over the deployment's steps, computed from the recipe and
/// the scenario alone. Only the provisioning ticks are read back from the
/// harness, since they are drawn from the seeded RNG.
fn oracle_duration(recipe: &DeploymentRecipe, scenario: &Scenario, h: &Harness) -> u64 {
    let nodes = plan(recipe).nodes;
    let boot_end = |id: &str| h.node(id).unwrap().ready_at + scenario.agent_boot_latency;
    let comp = |name: &str| recipe.components.iter().find(|c| c.name == name).unwrap();
    let latency = |image: &str| {
        scenario
            .image_latency
            .get(image)
            .copied()
            .unwrap_or(scenario.unit_start_latency)
    };

    let mut services: Vec<(BTreeSet<String>, u64)> = Vec::new();
    for s in &recipe.network_services {
        assert_eq!(s.service_type, ServiceType::Vpn, "oracle models the VPN only");
        let attached: BTreeSet<String> = nodes
            .iter()
            .filter(|n| n.roles.iter().any(|r| s.attach_roles.contains(r)))
            .map(|n| n.node_id.clone())
            .collect();
        let start = attached.iter().map(|n| boot_end(n)).max().unwrap();
        let end = start + latency(VPN_SERVER_IMAGE) + latency(VPN_CLIENT_IMAGE);
        services.push((attached, end));
    }

    let mut deploy_end: BTreeMap<String, u64> = BTreeMap::new();
    while deploy_end.len() < nodes.len() {
        for n in &nodes {
            if deploy_end.contains_key(&n.node_id) {
                continue;
            }
            let c = comp(&n.component);
            let parents: Vec<&str> = nodes
                .iter()
                .filter(|p| Some(&p.component) == c.parent.as_ref())
                .map(|p| p.node_id.as_str())
                .collect();
            if parents.iter().all(|p| deploy_end.contains_key(*p)) {
                let ready = parents
                    .iter()
                    .map(|p| deploy_end[*p])
                    .fold(boot_end(&n.node_id), u64::max);
                deploy_end.insert(n.node_id.clone(), ready + c.deploy_duration());
            }
        }
    }
    nodes
        .iter()
        .map(|n| {
            let gate = services
                .iter()
                .filter(|(att, _)| att.contains(&n.node_id))
                .map(|(_, end)| *end)
                .fold(deploy_end[&n.node_id], u64::max);
            gate + comp(&n.component).app_duration()
        })
        .max()
        .unwrap()
}

fn overhead() -> String {
    let recipe = reference_recipe();
    let mut baseline = recipe.clone();
    baseline.network_services.clear();

    let quiet = reference_scenario();
    let vpn_path = quiet.image_latency[VPN_SERVER_IMAGE] + quiet.image_latency[VPN_CLIENT_IMAGE];
    for c in &quiet.clouds {
        assert!(c.provision_latency.bounds().0 >= vpn_path, "scenario is not provisioning-dominant");
    }
    for seed in 1..=10 {
        let o = measure_overhead(&recipe, &quiet.clone().with_seed(seed)).unwrap();
        assert_eq!(o.overhead, 0, "seed {seed}: {o:?}");
    }

    let loud = service_dominant_scenario();
    let mut seen = Vec::new();
    for seed in 1..=10 {
        let sc = loud.clone().with_seed(seed);
        let o = measure_overhead(&recipe, &sc).unwrap();

        let with = Harness::new(sc.clone());
        RecipeEngine::standalone(with.clone()).deploy(&recipe).unwrap();
        let without = Harness::new(sc.clone());
        RecipeEngine::standalone(without.clone()).deploy(&baseline).unwrap();
        let expect_with = oracle_duration(&recipe, &sc, &with);
        let expect_base = oracle_duration(&baseline, &sc, &without);

        assert_eq!(o.with_services_duration, expect_with, "seed {seed}");
        assert_eq!(o.baseline_duration, expect_base, "seed {seed}");
        assert_eq!(o.overhead, expect_with as i64 - expect_base as i64, "seed {seed}");
        assert!(o.overhead > 0, "seed {seed}: service-dominant run shows no overhead");
        seen.push(o.overhead);
    }
    format!("overhead 0 on 10 seeds; service-dominant overheads {seen:?} equal the oracle")
}

fn cluster_recipe(dep: &str, workers: u32, subnet: &str) -> DeploymentRecipe {
    parse_recipe(&json!({
        "deployment_id": dep,
        "components": [
            {"name": "head", "image_ref": "apps/head", "roles": ["server", "app"],
             "deploy_script": [{"name": "install", "duration": 5}],
             "app_script": [{"name": "run", "duration": 2}]},
            {"name": "worker", "image_ref": "apps/worker", "parent": "head", "multiplicity": workers,
             "roles": ["app"],
             "deploy_script": [{"name": "install", "duration": 3}],
             "app_script": [{"name": "run", "duration": 2}]}
        ],
        "network_services": [{"type": "VPN", "params": {"subnet": subnet}, "attach_roles": ["app"]}],
        "clouds": [{"cloud_id": "openstack", "node_count": 4}, {"cloud_id": "stratuslab", "node_count": 4}]
    }))
    .unwrap()
}

fn roomy_scenario(seed: u64) -> Scenario {
    Scenario::from_json(
        &json!({
            "seed": seed,
            "clouds": [
                {"cloud_id": "openstack", "capacity": 64, "provision_latency": {"uniform": [5, 25]}},
                {"cloud_id": "stratuslab", "capacity": 64, "provision_latency": {"uniform": [8, 12]}}
            ],
            "image_latency": {"netsmo/vpn-server": 3, "netsmo/vpn-client": 2}
        })
        .to_string(),
    )
    .unwrap()
}

fn isolation() -> String {
    let h = Harness::new(roomy_scenario(3));
    let engine = RecipeEngine::standalone(h.clone());
    for (dep, subnet) in [("d1", "10.8.0.0/24"), ("d2", "10.9.0.0/24")] {
        let r = engine.deploy(&cluster_recipe(dep, 3, subnet)).unwrap();
        assert_eq!(r.status, DeploymentStatus::Done);
    }
    let o1 = h.overlay("d1").unwrap();
    let o2 = h.overlay("d2").unwrap();
    assert_eq!((o1.members.len(), o2.members.len()), (4, 4));

    let mut blocked = 0;
    for (a, b) in [(&o1, &o2), (&o2, &o1)] {
        for src in &a.members {
            for dst in &b.members {
                let r = h.send(&SimPacket::tcp(&src.node_id, dst.overlay_address, 443));
                assert!(!r.is_delivered(), "{} reached {}", src.node_id, dst.node_id);
                blocked += 1;
            }
        }
    }
    let mut delivered = 0;
    for o in [&o1, &o2] {
        for src in &o.members {
            for dst in o.members.iter().filter(|d| d.node_id != src.node_id) {
                let r = h.send(&SimPacket::tcp(&src.node_id, dst.overlay_address, 443));
                assert!(r.is_delivered(), "{} -> {}: {r:?}", src.node_id, dst.node_id);
                assert_eq!(r.hops.last(), Some(&dst.node_id));
                delivered += 1;
            }
        }
    }
    assert_eq!((blocked, delivered), (32, 24));
    format!("{blocked}/32 cross pairs blocked, {delivered}/24 intra pairs delivered")
}

fn single_entry() -> String {
    let h = Harness::new(roomy_scenario(4));
    let engine = RecipeEngine::standalone(h.clone());
    assert_eq!(
        engine.deploy(&cluster_recipe("five", 4, "10.8.0.0/24")).unwrap().status,
        DeploymentStatus::Done
    );
    let o = h.overlay("five").unwrap();
    assert_eq!(o.members.len(), 5);
    let server = o.server().node_id.clone();
    let clients: Vec<_> = o.members.iter().filter(|m| m.role == VpnRole::Client).collect();
    let mut pairs = 0;
    for a in &clients {
        for b in clients.iter().filter(|b| b.node_id != a.node_id) {
            let r = h.send(&SimPacket::tcp(&a.node_id, b.overlay_address, 8080));
            assert!(r.is_delivered(), "{} -> {}: {r:?}", a.node_id, b.node_id);
            assert!(r.hops.contains(&server), "{} -> {} skipped the server: {:?}", a.node_id, b.node_id, r.hops);
            for w in r.hops.windows(2) {
                assert!(h.link_exists(&w[0], &w[1]), "hop {} -> {} has no link", w[0], w[1]);
            }
            pairs += 1;
        }
    }
    assert_eq!(pairs, 12);
    format!("{pairs} client pairs all routed through {server}")
}

fn random_recipe(rng: &mut ChaCha8Rng, dep: &str) -> Document {
    let pool = ["app", "db", "web"];
    let n = rng.random_range(1..=5usize);
    let mut comps = Vec::new();
    let mut roles_of: Vec<(BTreeSet<String>, u32)> = Vec::new();
    for k in 0..n {
        let mut roles: BTreeSet<String> = pool
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .map(|r| r.to_string())
            .collect();
        let multiplicity = if k == 0 {
            roles.insert("server".into());
            1
        } else {
            rng.random_range(1..=2u32)
        };
        let parent = (k > 0 && rng.random_bool(0.6)).then(|| format!("c{}", rng.random_range(0..k)));
        let script = |rng: &mut ChaCha8Rng| {
            (0..rng.random_range(0..=2))
                .map(|i| json!({"name": format!("s{i}"), "duration": rng.random_range(1..=10u64)}))
                .collect::<Vec<_>>()
        };
        let mut c = json!({
            "name": format!("c{k}"),
            "image_ref": format!("img/c{k}"),
            "roles": roles,
            "multiplicity": multiplicity,
            "deploy_script": script(rng),
            "app_script": script(rng),
        });
        if let Some(p) = parent {
            c["parent"] = json!(p);
        }
        roles_of.push((roles, multiplicity));
        comps.push(c);
    }
    let present: Vec<&String> = roles_of.iter().flat_map(|(r, _)| r).collect::<BTreeSet<_>>().into_iter().collect();
    let attached_nodes = |att: &BTreeSet<String>| -> u32 {
        roles_of
            .iter()
            .filter(|(r, _)| r.iter().any(|x| att.contains(x)))
            .map(|(_, m)| m)
            .sum()
    };
    let mut services = Vec::new();
    for ty in ["VPN", "FIREWALL", "LOAD_BALANCER"] {
        if !rng.random_bool(0.6) {
            continue;
        }
        let mut att: BTreeSet<String> = present
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .map(|r| r.to_string())
            .collect();
        if att.is_empty() {
            att.insert(present.choose(rng).unwrap().to_string());
        }
        let mut s = json!({"type": ty, "attach_roles": att});
        match ty {
            "VPN" => {
                att.insert("server".into());
                if attached_nodes(&att) < 2 {
                    continue;
                }
                s["attach_roles"] = json!(att);
            }
            "FIREWALL" => {
                s["params"] = json!({"policy_id": "p", "default_inbound": "ALLOW", "rules": [
                    {"priority": 1, "direction": "IN", "protocol": "TCP", "src_cidr": "0.0.0.0/0",
                     "dst_cidr": "0.0.0.0/0", "dst_port_range": [23, 23], "action": "DENY"}
                ]})
            }
            _ => {}
        }
        services.push(s);
    }
    let total: u32 = roles_of.iter().map(|(_, m)| m).sum();
    json!({
        "deployment_id": dep,
        "components": comps,
        "network_services": services,
        "clouds": [{"cloud_id": "openstack", "node_count": total}, {"cloud_id": "stratuslab", "node_count": total}]
    })
}

fn ordering() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut checks = 0;
    let mut violations = Vec::new();
    let mut with_services = 0;
    for i in 0..100 {
        let doc = random_recipe(&mut rng, &format!("r{i}"));
        let recipe = parse_recipe(&doc).unwrap_or_else(|e| panic!("recipe {i}: {e}\n{doc}"));
        let dep = recipe.deployment_id.clone();
        let engine = RecipeEngine::standalone(Harness::new(roomy_scenario(i + 1)));
        let report = engine.deploy(&recipe).unwrap();
        assert_eq!(report.status, DeploymentStatus::Done, "recipe {i}: {report:?}");
        if !recipe.network_services.is_empty() {
            with_services += 1;
        }
        let nodes = plan(&recipe).nodes;
        let step = |id: &str| report.step(id).unwrap_or_else(|| panic!("recipe {i}: no step {id}"));
        let mut check = |ok: bool, what: String| {
            checks += 1;
            if !ok {
                violations.push(format!("recipe {i}: {what}"));
            }
        };

        for n in &nodes {
            let comp = recipe.components.iter().find(|c| c.name == n.component).unwrap();
            let d = step(&deploy_id(&n.node_id));
            for p in nodes.iter().filter(|p| Some(&p.component) == comp.parent.as_ref()) {
                let pd = step(&deploy_id(&p.node_id));
                check(
                    d.start_tick >= pd.end_tick,
                    format!("{} deploy at {:?} before parent {} ends {:?}", n.node_id, d.start_tick, p.node_id, pd.end_tick),
                );
            }
            let app = step(&app_id(&n.node_id));
            for s in &recipe.network_services {
                if !n.roles.iter().any(|r| s.attach_roles.contains(r)) {
                    continue;
                }
                let b = step(&barrier_id(s.service_type, &n.node_id));
                let svc = step(&netsvc_id(s.service_type));
                let ready = engine
                    .store()
                    .get(&status_key(&dep, s.service_type).unwrap())
                    .unwrap();
                check(b.end_tick >= svc.end_tick, format!("{} passed before {} ended", b.step_id, svc.step_id));
                check(app.start_tick >= b.end_tick, format!("{} started before {}", app.step_id, b.step_id));
                check(
                    app.start_tick.unwrap() >= ready.written_at,
                    format!("{} started before {} READY", app.step_id, s.service_type),
                );
            }
        }
    }
    assert!(violations.is_empty(), "{} violations: {:?}", violations.len(), violations);
    format!("100 recipes ({with_services} with services), {checks} inequalities, 0 violations")
}

fn crash_recovery() -> String {
    let reference = RecipeEngine::standalone(Harness::new(reference_scenario()))
        .deploy(&reference_recipe())
        .unwrap();
    let outcomes = reference.outcomes();
    let n = reference.steps.len();
    let doc = fixture_doc("reference-recipe.json");
    let dir = tempfile::tempdir().unwrap();
    for k in 0..n {
        let h = Harness::new(reference_scenario());
        let path = dir.path().join(format!("state-{k}.json"));
        let addr = format!("acceptance-crash:{}", 1000 + k);
        let agent = Agent::boot(AgentConfig::sim(&addr, &path), h.clone()).unwrap();
        agent.set_halt_after(Some(k));
        let r = agent.dispatch(&ApiRequest::post("/v1/deployments", doc.clone()));
        assert_eq!(r.status, 202, "k={k}: {r:?}");
        agent.shutdown(false).unwrap();
        drop(agent);

        let again = Agent::boot(AgentConfig::sim(&addr, &path), h.clone()).unwrap();
        let got = again.dispatch(&ApiRequest::get("/v1/deployments/ref"));
        let report: netsmo_core::DeploymentReport =
            serde_json::from_value(got.data().unwrap()["report"].clone()).unwrap();
        assert_eq!(report.outcomes(), outcomes, "crash after {k} steps");
        assert_eq!(h.node_count(), 3, "crash after {k} steps");
        let vpn = running_images(&h, VPN_SERVER_IMAGE).len() + running_images(&h, VPN_CLIENT_IMAGE).len();
        assert_eq!(vpn, 3, "crash after {k} steps");
        again.shutdown(true).unwrap();
    }
    format!("{n}/{n} crash points resumed to the reference outcome set")
}

/// One random case: a policy's raw rule list and a flow.
fn oracle_verdict(
    rules: &[FirewallRule],
    defaults: (Action, Action),
    flow: &Flow,
    dir: Direction,
) -> (Action, Option<u32>) {
    let in_net = |net: &Ipv4Net, a: Ipv4Addr| {
        let bits = net.prefix_len() as u32;
        let mask = if bits == 0 { 0 } else { u32::MAX << (32 - bits) };
        u32::from(a) & mask == u32::from(net.network()) & mask
    };
    let mut best: Option<&FirewallRule> = None;
    for r in rules {
        let proto = match r.protocol {
            RuleProtocol::Any => true,
            RuleProtocol::Tcp => flow.protocol == Protocol::Tcp,
            RuleProtocol::Udp => flow.protocol == Protocol::Udp,
        };
        let hit = r.direction == dir
            && proto
            && in_net(&r.src_cidr, flow.src)
            && in_net(&r.dst_cidr, flow.dst)
            && r.dst_port_range.lo <= flow.dst_port
            && flow.dst_port <= r.dst_port_range.hi;
        if hit && best.is_none_or(|b| r.priority < b.priority) {
            best = Some(r);
        }
    }
    match best {
        Some(r) => (r.action, Some(r.priority)),
        None if dir == Direction::In => (defaults.0, None),
        None => (defaults.1, None),
    }
}

fn firewall_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pool: Vec<Ipv4Addr> = (0..6).map(|i| Ipv4Addr::new(10, 0, i / 3, 1 + i % 3)).collect();
    let action = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { Action::Allow } else { Action::Deny };
    let dir = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { Direction::In } else { Direction::Out };
    let mut mismatches = Vec::new();
    let mut by_rule = 0;
    for case in 0..10_000 {
        let mut prios: Vec<u32> = (0..40).collect();
        let k = rng.random_range(0..=10);
        let rules: Vec<FirewallRule> = (0..k)
            .map(|_| {
                let p = prios.swap_remove(rng.random_range(0..prios.len()));
                let net = |rng: &mut ChaCha8Rng| {
                    Ipv4Net::new(*pool.choose(rng).unwrap(), rng.random_range(0..=32)).unwrap().trunc()
                };
                let lo = rng.random_range(0..=100u16);
                FirewallRule {
                    priority: p,
                    direction: dir(&mut rng),
                    protocol: *[RuleProtocol::Tcp, RuleProtocol::Udp, RuleProtocol::Any].choose(&mut rng).unwrap(),
                    src_cidr: net(&mut rng),
                    dst_cidr: net(&mut rng),
                    dst_port_range: PortRange::new(lo, lo + rng.random_range(0..=40)),
                    action: action(&mut rng),
                }
            })
            .collect();
        let defaults = (action(&mut rng), action(&mut rng));
        let policy = FirewallPolicy::new("p", defaults.0, defaults.1, rules.clone()).unwrap();
        let flow = Flow {
            src: *pool.choose(&mut rng).unwrap(),
            dst: *pool.choose(&mut rng).unwrap(),
            protocol: if rng.random_bool(0.5) { Protocol::Tcp } else { Protocol::Udp },
            dst_port: rng.random_range(0..=150),
        };
        let d = dir(&mut rng);
        let got = fw_evaluate(&policy, &flow, d);
        let got = (
            got.action,
            match got.matched_by {
                MatchedBy::Rule(p) => Some(p),
                MatchedBy::Default => None,
            },
        );
        let want = oracle_verdict(&rules, defaults, &flow, d);
        if want.1.is_some() {
            by_rule += 1;
        }
        if got != want {
            mismatches.push(format!("case {case}: got {got:?}, oracle {want:?}"));
        }
    }
    assert!(mismatches.is_empty(), "{} mismatches, first: {:?}", mismatches.len(), mismatches.first());
    format!("10000 cases ({by_rule} decided by a rule), 0 mismatches")
}

fn fairness_and_versions() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0;
    for trial in 0..40 {
        let bus = MessageBus::new(Clock::new(), trial);
        let members = rng.random_range(2..=8usize);
        let counts: Vec<Arc<AtomicUsize>> = (0..members).map(|_| Arc::new(AtomicUsize::new(0))).collect();
        for (i, c) in counts.iter().enumerate() {
            let c = c.clone();
            bus.subscribe("load/t", Some("workers"), &format!("w{i}"), Arc::new(move |_: &MessageBus, _: Envelope| {
                c.fetch_add(1, Ordering::SeqCst);
            }))
            .unwrap();
        }
        let publishers = rng.random_range(1..=4usize);
        let per: Vec<usize> = (0..publishers).map(|_| rng.random_range(0..=150)).collect();
        std::thread::scope(|s| {
            for (p, n) in per.iter().enumerate() {
                let bus = bus.clone();
                s.spawn(move || {
                    for j in 0..*n {
                        bus.publish_event("load/t", &format!("p{p}"), json!(j)).unwrap();
                    }
                });
            }
        });
        let got: Vec<usize> = counts.iter().map(|c| c.load(Ordering::SeqCst)).collect();
        assert_eq!(got.iter().sum::<usize>(), per.iter().sum::<usize>(), "trial {trial}: lost messages");
        let spread = got.iter().max().unwrap() - got.iter().min().unwrap();
        assert!(spread <= 1, "trial {trial}: counts {got:?}");
        worst = worst.max(spread);
    }

    let store = StateStore::new(Clock::new());
    let key = StateKey::parse("stress/counter").unwrap();
    let versions: Vec<u64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let store = store.clone();
                let key = key.clone();
                s.spawn(move || {
                    let mut mine = Vec::new();
                    while mine.len() < 125 {
                        let (ver, val) = store.get(&key).map_or((0, 0u64), |e| {
                            (e.version, e.value_str().unwrap().parse().unwrap())
                        });
                        match store.put(&key, (val + 1).to_string(), Some(ver)) {
                            Ok(e) => mine.push(e.version),
                            Err(StoreError::VersionConflict { .. }) => continue,
                            Err(e) => panic!("{e}"),
                        }
                    }
                    mine
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let mut sorted = versions.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (1..=1000).collect::<Vec<u64>>(), "versions are not gapless");
    let last = store.get(&key).unwrap();
    assert_eq!((last.version, last.value_str()), (1000, Some("1000")));
    format!("40 random loads, max spread {worst}; 1000 CAS writes by 8 writers, versions 1..=1000")
}

fn determinism() -> String {
    let run = || {
        let h = Harness::new(reference_scenario());
        let engine = RecipeEngine::standalone(h.clone());
        let report = engine.deploy(&reference_recipe()).unwrap();
        (
            h.trace_ndjson().into_bytes(),
            serde_json::to_vec(&report).unwrap(),
            engine.store().snapshot(),
        )
    };
    let (t1, r1, s1) = run();
    let (t2, r2, s2) = run();
    assert!(!t1.is_empty());
    assert!(t1 == t2, "traces differ");
    assert!(r1 == r2, "reports differ");
    assert!(s1 == s2, "store images differ");
    format!(
        "{} trace lines ({} bytes), {}-byte report and {}-byte store image identical",
        t1.iter().filter(|b| **b == b'\n').count(),
        t1.len(),
        r1.len(),
        s1.len()
    )
}
