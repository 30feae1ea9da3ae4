use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::plan::{netsvc_id, DeploymentPlan, StepKind};
use crate::clock::Tick;

pub const REPORT_SCHEMA: &str = "netsmo/report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepOutcome {
    Pending,
    Running,
    Done,
    Failed,
    Skipped,
}

/// Persisted under `deploy/<dep>/steps/<step_id>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub outcome: StepOutcome,
    #[serde(default)]
    pub start_tick: Option<Tick>,
    #[serde(default)]
    pub end_tick: Option<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeploymentStatus {
    Running,
    Done,
    Failed,
    /// Shut down cleanly mid-run; resumed at the next boot.
    Interrupted,
}

impl DeploymentStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DeploymentStatus::Running => "RUNNING",
            DeploymentStatus::Done => "DONE",
            DeploymentStatus::Failed => "FAILED",
            DeploymentStatus::Interrupted => "INTERRUPTED",
        }
    }
}

impl fmt::Display for DeploymentStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeploymentStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            DeploymentStatus::Running,
            DeploymentStatus::Done,
            DeploymentStatus::Failed,
            DeploymentStatus::Interrupted,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
        .ok_or_else(|| format!("unknown deployment status {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_id: String,
    pub kind: StepKind,
    pub target: String,
    pub start_tick: Option<Tick>,
    pub end_tick: Option<Tick>,
    pub outcome: StepOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentReport {
    pub schema: String,
    pub deployment_id: String,
    pub status: DeploymentStatus,
    /// Plan order.
    pub steps: Vec<StepReport>,
    pub total_duration: Tick,
    pub critical_path: Vec<String>,
}

impl DeploymentReport {
    pub fn build(
        plan: &DeploymentPlan,
        records: &BTreeMap<String, StepRecord>,
        status: DeploymentStatus,
    ) -> Self {
        let steps: Vec<StepReport> = plan
            .steps
            .iter()
            .map(|s| {
                let r = records.get(&s.step_id);
                StepReport {
                    step_id: s.step_id.clone(),
                    kind: s.kind,
                    target: s.target.clone(),
                    start_tick: r.and_then(|r| r.start_tick),
                    end_tick: r.and_then(|r| r.end_tick),
                    outcome: r.map_or(StepOutcome::Pending, |r| r.outcome),
                    detail: r.and_then(|r| r.detail.clone()),
                }
            })
            .collect();
        let timed = || steps.iter().filter_map(|s| Some((s.start_tick?, s.end_tick?)));
        let total_duration = match (timed().map(|t| t.0).min(), timed().map(|t| t.1).max()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0,
        };
        let critical_path = critical_path(plan, &steps);
        Self {
            schema: REPORT_SCHEMA.to_string(),
            deployment_id: plan.deployment_id.clone(),
            status,
            steps,
            total_duration,
            critical_path,
        }
    }

    pub fn step(&self, step_id: &str) -> Option<&StepReport> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }

    pub fn steps_of_kind(&self, kind: StepKind) -> impl Iterator<Item = &StepReport> {
        self.steps.iter().filter(move |s| s.kind == kind)
    }

    /// Step ids with their outcomes, for comparing runs.
    pub fn outcomes(&self) -> BTreeMap<String, StepOutcome> {
        self.steps
            .iter()
            .map(|s| (s.step_id.clone(), s.outcome))
            .collect()
    }

    pub fn failed_steps(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter(|s| s.outcome == StepOutcome::Failed)
            .map(|s| s.step_id.as_str())
            .collect()
    }
}

/// Walks back from the last step to finish, each time to the predecessor
/// that finished last. A barrier's predecessors include the service step
/// it waited for.
fn critical_path(plan: &DeploymentPlan, steps: &[StepReport]) -> Vec<String> {
    let end: BTreeMap<&str, Tick> = steps
        .iter()
        .filter_map(|s| Some((s.step_id.as_str(), s.end_tick?)))
        .collect();
    let order: BTreeMap<&str, usize> = plan
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.step_id.as_str(), i))
        .collect();
    let latest = |ids: Vec<&str>| -> Option<String> {
        ids.into_iter()
            .filter_map(|id| Some((id, *end.get(id)?)))
            .max_by(|a, b| a.1.cmp(&b.1).then(order[b.0].cmp(&order[a.0])))
            .map(|(id, _)| id.to_string())
    };
    let mut cur = latest(plan.steps.iter().map(|s| s.step_id.as_str()).collect());
    let mut path = Vec::new();
    while let Some(id) = cur {
        let step = plan.step(&id).expect("report steps come from the plan");
        let mut preds: Vec<String> = step.depends_on.iter().cloned().collect();
        if let (StepKind::BarrierWait, Some(t)) = (step.kind, step.service) {
            preds.push(netsvc_id(t));
        }
        path.push(id);
        cur = latest(preds.iter().map(String::as_str).collect());
    }
    path.reverse();
    path
}
