use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::LifecycleState;
use crate::bus::Document;
use crate::store::is_valid_segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServiceType {
    Vpn,
    Firewall,
    LoadBalancer,
    App,
    Composite,
}

impl ServiceType {
    pub fn as_str(self) -> &'static str {
        match self {
            ServiceType::Vpn => "VPN",
            ServiceType::Firewall => "FIREWALL",
            ServiceType::LoadBalancer => "LOAD_BALANCER",
            ServiceType::App => "APP",
            ServiceType::Composite => "COMPOSITE",
        }
    }
}

impl fmt::Display for ServiceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a node agent starts the service's execution unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub image_ref: String,
    #[serde(default)]
    pub entry_args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl LaunchSpec {
    pub fn new(image_ref: impl Into<String>) -> Self {
        Self {
            image_ref: image_ref.into(),
            entry_args: Vec::new(),
            env: BTreeMap::new(),
        }
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.insert(key.into(), value.into());
        self
    }

    /// Ports published through `EXPOSE_<name>=<port>` variables.
    pub fn exposed_ports(&self) -> Vec<(String, u16)> {
        self.env
            .iter()
            .filter_map(|(k, v)| {
                let name = k.strip_prefix("EXPOSE_")?;
                Some((name.to_ascii_lowercase(), v.parse().ok()?))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub service_type: ServiceType,
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default)]
    pub required_roles: BTreeSet<String>,
    pub launch_spec: LaunchSpec,
    #[serde(default)]
    pub config: Document,
}

fn default_version() -> String {
    "1".to_string()
}

impl ServiceDescriptor {
    pub fn new(service_id: impl Into<String>, service_type: ServiceType, launch_spec: LaunchSpec) -> Self {
        Self {
            service_id: service_id.into(),
            service_type,
            version: default_version(),
            required_roles: BTreeSet::new(),
            launch_spec,
            config: Document::Null,
        }
    }

    /// Child descriptors of a COMPOSITE, read from `config.children`.
    pub fn children(&self) -> Result<Vec<ServiceDescriptor>, String> {
        match self.config.get("children") {
            None | Some(Document::Null) => Ok(Vec::new()),
            Some(c) => serde_json::from_value(c.clone()).map_err(|e| format!("children: {e}")),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !is_valid_segment(&self.service_id) {
            return Err(format!("service_id {:?} is not a valid key segment", self.service_id));
        }
        if self.launch_spec.image_ref.is_empty() {
            return Err(format!("{}: launch_spec.image_ref is empty", self.service_id));
        }
        let children = self.children()?;
        if self.service_type != ServiceType::Composite {
            if !children.is_empty() {
                return Err(format!("{}: only COMPOSITE services have children", self.service_id));
            }
            return Ok(());
        }
        let mut seen = BTreeSet::new();
        for c in &children {
            c.validate()?;
            if c.service_id == self.service_id || !seen.insert(c.service_id.clone()) {
                return Err(format!("{}: duplicate child id {}", self.service_id, c.service_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub name: String,
    pub address: Ipv4Addr,
    pub port: u16,
}

/// Per-node instantiation of a service. Persisted as JSON under
/// `deploy/<deployment>/instances/<instance_id>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInstance {
    pub instance_id: String,
    pub descriptor_ref: String,
    pub deployment_id: String,
    pub node_id: String,
    pub state: LifecycleState,
    #[serde(default)]
    pub endpoints: Vec<Endpoint>,
    #[serde(default)]
    pub parent_instance: Option<String>,
    #[serde(default)]
    pub unit_id: Option<String>,
    /// Automatic FAILED to DEPLOYING retries taken so far.
    #[serde(default)]
    pub retries: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn exposed_ports_from_env() {
        let spec = LaunchSpec::new("img")
            .with_env("EXPOSE_VPN", "1194")
            .with_env("EXPOSE_BAD", "x")
            .with_env("OTHER", "1");
        assert_eq!(spec.exposed_ports(), vec![("vpn".to_string(), 1194)]);
    }

    #[test]
    fn validation() {
        let ok = ServiceDescriptor::new("vpn", ServiceType::Vpn, LaunchSpec::new("img"));
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.launch_spec.image_ref.clear();
        assert!(bad.validate().is_err());
        bad = ok.clone();
        bad.service_id = "a/b".into();
        assert!(bad.validate().is_err());

        let mut comp = ServiceDescriptor::new("net", ServiceType::Composite, LaunchSpec::new("c"));
        comp.config = json!({"children": [ok, ok]});
        assert!(comp.validate().unwrap_err().contains("duplicate child"));
    }

    #[test]
    fn descriptor_json_defaults() {
        let d: ServiceDescriptor = serde_json::from_value(json!({
            "service_id": "fw", "service_type": "FIREWALL",
            "launch_spec": {"image_ref": "netsmo/firewall"}
        }))
        .unwrap();
        assert_eq!(d.version, "1");
        assert!(d.required_roles.is_empty());
        assert!(d.children().unwrap().is_empty());
    }
}
