use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use crate::bus::Document;
use crate::clock::Tick;
use crate::net::firewall::FirewallPolicy;
use crate::net::vpn::{plan_vpn, MemberNode, DEFAULT_SERVER_ROLE};
use crate::net::LbParams;
use crate::service::ServiceType;
use crate::store::is_valid_segment;

pub const RECIPE_SCHEMA: &str = "netsmo/recipe/1";

fn default_schema() -> String {
    RECIPE_SCHEMA.to_string()
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub name: String,
    pub duration: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub name: String,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub roles: BTreeSet<String>,
    #[serde(default = "one")]
    pub multiplicity: u32,
    #[serde(default)]
    pub deploy_script: Vec<ScriptStep>,
    #[serde(default)]
    pub app_script: Vec<ScriptStep>,
    /// Pins the component's nodes to one cloud.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<String>,
    #[serde(default)]
    pub public: bool,
}

impl Component {
    pub fn new(name: impl Into<String>, image_ref: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            image_ref: image_ref.into(),
            parent: None,
            roles: BTreeSet::new(),
            multiplicity: 1,
            deploy_script: Vec::new(),
            app_script: Vec::new(),
            cloud: None,
            public: false,
        }
    }

    pub fn deploy_duration(&self) -> Tick {
        self.deploy_script.iter().map(|s| s.duration).sum()
    }

    pub fn app_duration(&self) -> Tick {
        self.app_script.iter().map(|s| s.duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkServiceSpec {
    #[serde(rename = "type")]
    pub service_type: ServiceType,
    #[serde(default)]
    pub params: Document,
    pub attach_roles: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudRequest {
    pub cloud_id: String,
    pub node_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentRecipe {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub deployment_id: String,
    pub components: Vec<Component>,
    #[serde(default)]
    pub network_services: Vec<NetworkServiceSpec>,
    #[serde(default)]
    pub clouds: Vec<CloudRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VpnParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subnet: Option<Ipv4Net>,
    #[serde(default = "default_server_role")]
    pub server_role: String,
}

fn default_server_role() -> String {
    DEFAULT_SERVER_ROLE.to_string()
}

impl Default for VpnParams {
    fn default() -> Self {
        Self {
            subnet: None,
            server_role: default_server_role(),
        }
    }
}

fn params_or_default<T: serde::de::DeserializeOwned + Default>(doc: &Document) -> Result<T, String> {
    match doc {
        Document::Null => Ok(T::default()),
        d => serde_json::from_value(d.clone()).map_err(|e| e.to_string()),
    }
}

impl NetworkServiceSpec {
    pub fn vpn_params(&self) -> Result<VpnParams, String> {
        params_or_default(&self.params)
    }

    pub fn firewall_policy(&self) -> Result<FirewallPolicy, String> {
        match &self.params {
            Document::Null => Err("firewall params must be a policy document".into()),
            d => serde_json::from_value(d.clone()).map_err(|e| e.to_string()),
        }
    }

    pub fn lb_params(&self) -> Result<LbParams, String> {
        params_or_default(&self.params)
    }
}

/// One concrete node derived from a component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedNode {
    pub node_id: String,
    pub component: String,
    pub cloud_id: String,
    pub roles: BTreeSet<String>,
    pub public: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnsupportedSchema { schema: String },
    InvalidName { field: String, value: String },
    DuplicateComponent { name: String },
    UnknownParent { component: String, parent: String },
    Cycle { cycle: Vec<String> },
    ZeroMultiplicity { component: String },
    EmptyImage { component: String },
    UnsupportedService { service_type: ServiceType },
    DuplicateService { service_type: ServiceType },
    UnknownAttachRole { service_type: ServiceType, role: String },
    InvalidParams { service_type: ServiceType, reason: String },
    DuplicateCloud { cloud_id: String },
    UnknownCloud { component: String, cloud_id: String },
    InsufficientNodes { cloud_id: Option<String>, needed: u64, available: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedSchema { schema } => {
                write!(f, "schema {schema:?} is not {RECIPE_SCHEMA:?}")
            }
            Violation::InvalidName { field, value } => write!(f, "{field}: {value:?} is not a valid name"),
            Violation::DuplicateComponent { name } => write!(f, "component {name} is declared twice"),
            Violation::UnknownParent { component, parent } => {
                write!(f, "component {component} names unknown parent {parent}")
            }
            Violation::Cycle { cycle } => write!(f, "parent cycle: {}", cycle.join(" -> ")),
            Violation::ZeroMultiplicity { component } => {
                write!(f, "component {component} has multiplicity 0")
            }
            Violation::EmptyImage { component } => write!(f, "component {component} has no image_ref"),
            Violation::UnsupportedService { service_type } => {
                write!(f, "{service_type} is not a network service")
            }
            Violation::DuplicateService { service_type } => {
                write!(f, "{service_type} is requested more than once")
            }
            Violation::UnknownAttachRole { service_type, role } => {
                write!(f, "{service_type} attaches to unknown role {role}")
            }
            Violation::InvalidParams {
                service_type,
                reason,
            } => write!(f, "{service_type} params: {reason}"),
            Violation::DuplicateCloud { cloud_id } => write!(f, "cloud {cloud_id} is listed twice"),
            Violation::UnknownCloud { component, cloud_id } => {
                write!(f, "component {component} pins unknown cloud {cloud_id}")
            }
            Violation::InsufficientNodes {
                cloud_id,
                needed,
                available,
            } => match cloud_id {
                Some(c) => write!(f, "cloud {c}: {needed} nodes needed, {available} requested"),
                None => write!(f, "{needed} nodes needed, clouds provide {available}"),
            },
        }
    }
}

/// Every parent cycle, each rotated to start at its smallest name.
fn parent_cycles(components: &[Component]) -> Vec<Vec<String>> {
    let parent: BTreeMap<&str, &str> = components
        .iter()
        .filter_map(|c| Some((c.name.as_str(), c.parent.as_deref()?)))
        .collect();
    let mut cycles = BTreeSet::new();
    for c in components {
        let mut path: Vec<&str> = vec![c.name.as_str()];
        let mut cur = c.name.as_str();
        while let Some(&p) = parent.get(cur) {
            if let Some(pos) = path.iter().position(|x| *x == p) {
                let mut cyc: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
                let min = cyc
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.cmp(b.1))
                    .map(|(i, _)| i)
                    .expect("non-empty");
                cyc.rotate_left(min);
                cycles.insert(cyc);
                break;
            }
            path.push(p);
            cur = p;
        }
    }
    cycles.into_iter().collect()
}

impl DeploymentRecipe {
    /// Expands components into nodes and assigns clouds.
    ///
    /// Pinned components take slots on their cloud first; the rest fill the
    /// remaining slots in cloud order. Fails with the capacity violations.
    pub fn expand_nodes(&self) -> Result<Vec<PlannedNode>, Vec<Violation>> {
        let mut slots: BTreeMap<&str, u64> = self
            .clouds
            .iter()
            .map(|c| (c.cloud_id.as_str(), c.node_count as u64))
            .collect();
        let mut violations = Vec::new();
        let mut pinned_need: BTreeMap<&str, u64> = BTreeMap::new();
        for c in &self.components {
            if let Some(cloud) = &c.cloud {
                *pinned_need.entry(cloud.as_str()).or_default() += c.multiplicity as u64;
            }
        }
        for (cloud, need) in &pinned_need {
            if let Some(avail) = slots.get_mut(cloud) {
                if *need > *avail {
                    violations.push(Violation::InsufficientNodes {
                        cloud_id: Some(cloud.to_string()),
                        needed: *need,
                        available: *avail,
                    });
                    *avail = 0;
                } else {
                    *avail -= need;
                }
            }
        }
        let floating: u64 = self
            .components
            .iter()
            .filter(|c| c.cloud.is_none())
            .map(|c| c.multiplicity as u64)
            .sum();
        let free: u64 = slots.values().sum();
        if floating > free {
            violations.push(Violation::InsufficientNodes {
                cloud_id: None,
                needed: floating,
                available: free,
            });
        }
        if !violations.is_empty() {
            return Err(violations);
        }

        let order: Vec<&str> = self.clouds.iter().map(|c| c.cloud_id.as_str()).collect();
        let mut nodes = Vec::new();
        for c in &self.components {
            for i in 1..=c.multiplicity {
                let node_id = if c.multiplicity == 1 {
                    format!("{}.{}", self.deployment_id, c.name)
                } else {
                    format!("{}.{}-{i}", self.deployment_id, c.name)
                };
                let cloud_id = match &c.cloud {
                    Some(pinned) => pinned.clone(),
                    None => {
                        let cloud = order
                            .iter()
                            .find(|id| slots.get(**id).is_some_and(|n| *n > 0))
                            .expect("capacity checked above");
                        *slots.get_mut(cloud).expect("present") -= 1;
                        cloud.to_string()
                    }
                };
                nodes.push(PlannedNode {
                    node_id,
                    component: c.name.clone(),
                    cloud_id,
                    roles: c.roles.clone(),
                    public: c.public,
                });
            }
        }
        Ok(nodes)
    }

    /// Nodes whose component carries any of `roles`, in node order.
    pub fn attached_nodes<'a>(
        nodes: &'a [PlannedNode],
        roles: &'a BTreeSet<String>,
    ) -> impl Iterator<Item = &'a PlannedNode> + 'a {
        nodes.iter().filter(|n| !n.roles.is_disjoint(roles))
    }

    /// Lists every violation of the recipe invariants.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.schema != RECIPE_SCHEMA {
            v.push(Violation::UnsupportedSchema {
                schema: self.schema.clone(),
            });
        }
        if !is_valid_segment(&self.deployment_id) {
            v.push(Violation::InvalidName {
                field: "deployment_id".into(),
                value: self.deployment_id.clone(),
            });
        }

        let mut names = BTreeSet::new();
        for c in &self.components {
            if !is_valid_segment(&c.name) {
                v.push(Violation::InvalidName {
                    field: "components.name".into(),
                    value: c.name.clone(),
                });
            }
            if !names.insert(c.name.as_str()) {
                v.push(Violation::DuplicateComponent {
                    name: c.name.clone(),
                });
            }
            if c.multiplicity == 0 {
                v.push(Violation::ZeroMultiplicity {
                    component: c.name.clone(),
                });
            }
            if c.image_ref.is_empty() {
                v.push(Violation::EmptyImage {
                    component: c.name.clone(),
                });
            }
        }
        for c in &self.components {
            if let Some(p) = &c.parent {
                if !names.contains(p.as_str()) {
                    v.push(Violation::UnknownParent {
                        component: c.name.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        for cycle in parent_cycles(&self.components) {
            v.push(Violation::Cycle { cycle });
        }

        let mut cloud_ids = BTreeSet::new();
        for c in &self.clouds {
            if !is_valid_segment(&c.cloud_id) {
                v.push(Violation::InvalidName {
                    field: "clouds.cloud_id".into(),
                    value: c.cloud_id.clone(),
                });
            }
            if !cloud_ids.insert(c.cloud_id.as_str()) {
                v.push(Violation::DuplicateCloud {
                    cloud_id: c.cloud_id.clone(),
                });
            }
        }
        let mut unknown_cloud = false;
        for c in &self.components {
            if let Some(cloud) = &c.cloud {
                if !cloud_ids.contains(cloud.as_str()) {
                    unknown_cloud = true;
                    v.push(Violation::UnknownCloud {
                        component: c.name.clone(),
                        cloud_id: cloud.clone(),
                    });
                }
            }
        }

        let all_roles: BTreeSet<&String> = self.components.iter().flat_map(|c| &c.roles).collect();
        let mut seen_services = BTreeSet::new();
        for s in &self.network_services {
            if !matches!(
                s.service_type,
                ServiceType::Vpn | ServiceType::Firewall | ServiceType::LoadBalancer
            ) {
                v.push(Violation::UnsupportedService {
                    service_type: s.service_type,
                });
                continue;
            }
            if !seen_services.insert(s.service_type) {
                v.push(Violation::DuplicateService {
                    service_type: s.service_type,
                });
            }
            for r in &s.attach_roles {
                if !all_roles.contains(r) {
                    v.push(Violation::UnknownAttachRole {
                        service_type: s.service_type,
                        role: r.clone(),
                    });
                }
            }
            let params = match s.service_type {
                ServiceType::Vpn => s.vpn_params().map(drop),
                ServiceType::Firewall => s.firewall_policy().map(drop),
                _ => s.lb_params().map(drop),
            };
            if let Err(reason) = params {
                v.push(Violation::InvalidParams {
                    service_type: s.service_type,
                    reason,
                });
            }
        }

        let structural_ok = v.is_empty();
        if !unknown_cloud {
            match self.expand_nodes() {
                Ok(nodes) if structural_ok => v.extend(self.service_placement_violations(&nodes)),
                Ok(_) => {}
                Err(cap) => v.extend(cap),
            }
        }
        v
    }

    /// Checks that each service has enough attached nodes to be planned.
    fn service_placement_violations(&self, nodes: &[PlannedNode]) -> Vec<Violation> {
        let mut v = Vec::new();
        for s in &self.network_services {
            let attached: Vec<&PlannedNode> = Self::attached_nodes(nodes, &s.attach_roles).collect();
            let reason = match s.service_type {
                ServiceType::Vpn => {
                    let params = s.vpn_params().expect("validated");
                    let members: Vec<MemberNode> = attached
                        .iter()
                        .map(|n| MemberNode {
                            node_id: n.node_id.clone(),
                            roles: n.roles.clone(),
                            underlay_address: None,
                        })
                        .collect();
                    plan_vpn(&self.deployment_id, &members, params.subnet, &params.server_role)
                        .err()
                        .map(|e| e.to_string())
                }
                _ if attached.is_empty() => Some("no node carries an attached role".to_string()),
                _ => None,
            };
            if let Some(reason) = reason {
                v.push(Violation::InvalidParams {
                    service_type: s.service_type,
                    reason,
                });
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_is_reported_once_from_smallest_name() {
        let mut a = Component::new("b", "img");
        a.parent = Some("a".into());
        let mut b = Component::new("a", "img");
        b.parent = Some("b".into());
        let mut c = Component::new("c", "img");
        c.parent = Some("a".into());
        assert_eq!(parent_cycles(&[a, b, c]), vec![vec!["a".to_string(), "b".to_string()]]);
    }

    #[test]
    fn multiplicity_expands_and_fills_clouds_in_order() {
        let mut web = Component::new("web", "img");
        web.multiplicity = 3;
        let mut db = Component::new("db", "img");
        db.cloud = Some("b".into());
        let r = DeploymentRecipe {
            schema: RECIPE_SCHEMA.into(),
            deployment_id: "d".into(),
            components: vec![web, db],
            network_services: vec![],
            clouds: vec![
                CloudRequest { cloud_id: "a".into(), node_count: 2 },
                CloudRequest { cloud_id: "b".into(), node_count: 2 },
            ],
        };
        let nodes = r.expand_nodes().unwrap();
        let got: Vec<(&str, &str)> = nodes
            .iter()
            .map(|n| (n.node_id.as_str(), n.cloud_id.as_str()))
            .collect();
        assert_eq!(
            got,
            vec![("d.web-1", "a"), ("d.web-2", "a"), ("d.web-3", "b"), ("d.db", "b")]
        );
    }
}
