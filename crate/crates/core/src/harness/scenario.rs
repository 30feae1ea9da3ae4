use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Tick;
use crate::recipe::StepKind;

/// Tick distribution for provisioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Latency {
    Fixed(Tick),
    Uniform([Tick; 2]),
}

impl Latency {
    pub fn bounds(&self) -> (Tick, Tick) {
        match *self {
            Latency::Fixed(t) => (t, t),
            Latency::Uniform([lo, hi]) => (lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    pub cloud_id: String,
    pub capacity: u32,
    pub provision_latency: Latency,
    /// Nodes of a public cloud get internet-reachable underlay addresses.
    #[serde(default)]
    pub public: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultTarget {
    Node(String),
    Cloud(String),
    Step {
        kind: StepKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultMode {
    FailOnce,
    FailAlways,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub target: FaultTarget,
    pub mode: FaultMode,
}

fn default_seed() -> u64 {
    1
}
fn default_agent_boot() -> Tick {
    2
}
fn default_unit_start() -> Tick {
    3
}
fn default_barrier_timeout() -> Tick {
    10_000
}

/// Harness configuration, loadable from a JSON scenario file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub clouds: Vec<CloudSpec>,
    #[serde(default = "default_agent_boot")]
    pub agent_boot_latency: Tick,
    /// Start latency of images without an entry in `image_latency`.
    #[serde(default = "default_unit_start")]
    pub unit_start_latency: Tick,
    #[serde(default)]
    pub image_latency: BTreeMap<String, Tick>,
    /// How long an application script waits for its network services.
    #[serde(default = "default_barrier_timeout")]
    pub barrier_timeout: Tick,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl Scenario {
    pub fn new(seed: u64, clouds: Vec<CloudSpec>) -> Self {
        Self {
            seed,
            clouds,
            agent_boot_latency: default_agent_boot(),
            unit_start_latency: default_unit_start(),
            image_latency: BTreeMap::new(),
            barrier_timeout: default_barrier_timeout(),
            faults: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.clouds {
            if !ids.insert(&c.cloud_id) {
                return Err(ScenarioError::Invalid(format!("duplicate cloud {}", c.cloud_id)));
            }
            let (lo, hi) = c.provision_latency.bounds();
            if lo > hi {
                return Err(ScenarioError::Invalid(format!(
                    "cloud {}: latency bounds [{lo}, {hi}] inverted",
                    c.cloud_id
                )));
            }
        }
        for f in &self.faults {
            if let FaultTarget::Cloud(c) = &f.target {
                if !ids.contains(c) {
                    return Err(ScenarioError::Invalid(format!("fault on unknown cloud {c}")));
                }
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn image_latency(&self, image_ref: &str) -> Tick {
        self.image_latency
            .get(image_ref)
            .copied()
            .unwrap_or(self.unit_start_latency)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_with_defaults() {
        let s = Scenario::from_json(
            &json!({
                "seed": 7,
                "clouds": [
                    {"cloud_id": "a", "capacity": 2, "provision_latency": {"fixed": 10}},
                    {"cloud_id": "b", "capacity": 2, "provision_latency": {"uniform": [5, 15]}, "public": true}
                ],
                "faults": [{"target": {"step": {"kind": "PROVISION"}}, "mode": "FAIL_ONCE"},
                           {"target": {"node": "d.x"}, "mode": "FAIL_ALWAYS"}]
            })
            .to_string(),
        )
        .unwrap();
        assert_eq!(s.agent_boot_latency, 2);
        assert_eq!(s.clouds[1].provision_latency, Latency::Uniform([5, 15]));
        assert_eq!(s.image_latency("anything"), 3);
        assert_eq!(s.faults.len(), 2);
    }

    #[test]
    fn rejects_bad_input_with_path() {
        let err = Scenario::from_json(r#"{"clouds": [{"cloud_id": "a", "capacity": "x", "provision_latency": {"fixed": 1}}]}"#)
            .unwrap_err();
        match err {
            ScenarioError::Parse { path, .. } => assert_eq!(path, "clouds[0].capacity"),
            other => panic!("{other}"),
        }
        let inverted = r#"{"clouds": [{"cloud_id": "a", "capacity": 1, "provision_latency": {"uniform": [9, 1]}}]}"#;
        assert!(matches!(Scenario::from_json(inverted), Err(ScenarioError::Invalid(_))));
    }
}
