use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::model::{DeploymentRecipe, PlannedNode};
use crate::service::ServiceType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepKind {
    Provision,
    AgentBoot,
    NetServiceDeploy,
    BarrierWait,
    ComponentDeployScript,
    ComponentAppScript,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_id: String,
    pub kind: StepKind,
    /// Node id, or the service type for NET_SERVICE_DEPLOY.
    pub target: String,
    /// Service type a BARRIER_WAIT waits for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<ServiceType>,
    pub depends_on: BTreeSet<String>,
}

/// The executable form of a recipe. Steps are listed in a topological
/// order of the dependency DAG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub deployment_id: String,
    pub nodes: Vec<PlannedNode>,
    pub steps: Vec<PlanStep>,
    pub recipe: DeploymentRecipe,
}

pub fn provision_id(node: &str) -> String {
    format!("provision.{node}")
}
pub fn boot_id(node: &str) -> String {
    format!("boot.{node}")
}
pub fn netsvc_id(t: ServiceType) -> String {
    format!("netsvc.{t}")
}
pub fn barrier_id(t: ServiceType, node: &str) -> String {
    format!("barrier.{t}.{node}")
}
pub fn deploy_id(node: &str) -> String {
    format!("deploy.{node}")
}
pub fn app_id(node: &str) -> String {
    format!("app.{node}")
}

impl DeploymentPlan {
    pub fn step(&self, step_id: &str) -> Option<&PlanStep> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }

    pub fn node(&self, node_id: &str) -> Option<&PlannedNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn steps_of_kind(&self, kind: StepKind) -> impl Iterator<Item = &PlanStep> {
        self.steps.iter().filter(move |s| s.kind == kind)
    }

    /// Direct dependents of each step.
    pub fn dependents(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> =
            self.steps.iter().map(|s| (s.step_id.as_str(), Vec::new())).collect();
        for s in &self.steps {
            for d in &s.depends_on {
                out.entry(d.as_str()).or_default().push(s.step_id.as_str());
            }
        }
        out
    }
}

/// Builds the plan for a recipe that has passed validation.
///
/// Per node: PROVISION then AGENT_BOOT. Each network service deploys once
/// its attached nodes have booted, and every attached node gets a
/// BARRIER_WAIT on the service status that gates its application script.
/// A child component's deploy script waits for every node of its parent.
pub fn plan(recipe: &DeploymentRecipe) -> DeploymentPlan {
    let nodes = recipe
        .expand_nodes()
        .expect("plan() requires a validated recipe");
    let mut steps: Vec<PlanStep> = Vec::new();
    let mut push = |step_id: String, kind, target: &str, service, deps: BTreeSet<String>| {
        steps.push(PlanStep {
            step_id,
            kind,
            target: target.to_string(),
            service,
            depends_on: deps,
        })
    };

    for n in &nodes {
        push(provision_id(&n.node_id), StepKind::Provision, &n.node_id, None, BTreeSet::new());
        push(
            boot_id(&n.node_id),
            StepKind::AgentBoot,
            &n.node_id,
            None,
            [provision_id(&n.node_id)].into(),
        );
    }

    let mut barriers_of: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for s in &recipe.network_services {
        let attached: Vec<&PlannedNode> =
            DeploymentRecipe::attached_nodes(&nodes, &s.attach_roles).collect();
        let deps = attached.iter().map(|n| boot_id(&n.node_id)).collect();
        push(
            netsvc_id(s.service_type),
            StepKind::NetServiceDeploy,
            s.service_type.as_str(),
            None,
            deps,
        );
        for n in attached {
            let id = barrier_id(s.service_type, &n.node_id);
            push(
                id.clone(),
                StepKind::BarrierWait,
                &n.node_id,
                Some(s.service_type),
                [boot_id(&n.node_id)].into(),
            );
            barriers_of.entry(n.node_id.as_str()).or_default().insert(id);
        }
    }

    let by_component: BTreeMap<&str, Vec<&str>> =
        nodes.iter().fold(BTreeMap::new(), |mut m, n| {
            m.entry(n.component.as_str()).or_insert_with(Vec::new).push(n.node_id.as_str());
            m
        });
    let parent_of: BTreeMap<&str, &str> = recipe
        .components
        .iter()
        .filter_map(|c| Some((c.name.as_str(), c.parent.as_deref()?)))
        .collect();
    for n in &nodes {
        let mut deps: BTreeSet<String> = [boot_id(&n.node_id)].into();
        if let Some(parent) = parent_of.get(n.component.as_str()) {
            for p in by_component.get(parent).into_iter().flatten() {
                deps.insert(deploy_id(p));
            }
        }
        push(deploy_id(&n.node_id), StepKind::ComponentDeployScript, &n.node_id, None, deps);
    }
    for n in &nodes {
        let mut deps: BTreeSet<String> = [deploy_id(&n.node_id)].into();
        if let Some(b) = barriers_of.get(n.node_id.as_str()) {
            deps.extend(b.iter().cloned());
        }
        push(app_id(&n.node_id), StepKind::ComponentAppScript, &n.node_id, None, deps);
    }

    DeploymentPlan {
        deployment_id: recipe.deployment_id.clone(),
        nodes,
        steps: topo_sort(steps),
        recipe: recipe.clone(),
    }
}

/// Kahn's algorithm, breaking ties by original position.
fn topo_sort(steps: Vec<PlanStep>) -> Vec<PlanStep> {
    let index: BTreeMap<String, usize> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.step_id.clone(), i))
        .collect();
    let mut indegree: Vec<usize> = steps.iter().map(|s| s.depends_on.len()).collect();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); steps.len()];
    for (i, s) in steps.iter().enumerate() {
        for d in &s.depends_on {
            dependents[index[d]].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..steps.len()).filter(|i| indegree[*i] == 0).collect();
    let mut order = Vec::with_capacity(steps.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &j in &dependents[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.insert(j);
            }
        }
    }
    assert_eq!(order.len(), steps.len(), "validated recipes plan to a DAG");
    let mut slots: Vec<Option<PlanStep>> = steps.into_iter().map(Some).collect();
    order
        .into_iter()
        .map(|i| slots[i].take().expect("each index once"))
        .collect()
}
