//! Deployment recipes: parsing, planning, execution and resume.
//!
//! Store layout per deployment:
//!
//! ```text
//! deploy/<dep>/recipe             recipe JSON
//! deploy/<dep>/plan               plan JSON
//! deploy/<dep>/status             RUNNING | DONE | FAILED | INTERRUPTED
//! deploy/<dep>/steps/<step_id>    step record JSON, written when a step
//!                                 starts and again when it ends
//! deploy/<dep>/nodes/<node>/roles roles announced by the node agent
//! ```

mod execute;
mod model;
mod overhead;
mod plan;
mod report;

use std::collections::BTreeMap;

use parking_lot::Mutex;
use thiserror::Error;

use crate::bus::{Document, MessageBus};
use crate::harness::Harness;
use crate::service::{LifecycleState, ServiceFramework};
use crate::store::{StateKey, StateStore, StoreError};

pub use execute::ExecOptions;
pub use model::{
    CloudRequest, Component, DeploymentRecipe, NetworkServiceSpec, PlannedNode, ScriptStep,
    Violation, VpnParams, RECIPE_SCHEMA,
};
pub use overhead::{measure_overhead, OverheadReport};
pub use plan::{
    app_id, barrier_id, boot_id, deploy_id, netsvc_id, plan, provision_id, DeploymentPlan,
    PlanStep, StepKind,
};
pub use report::{
    DeploymentReport, DeploymentStatus, StepOutcome, StepRecord, StepReport, REPORT_SCHEMA,
};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("recipe {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("recipe is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
    #[error("unknown deployment {0}")]
    UnknownDeployment(String),
    #[error("deployment {0} already exists")]
    DeploymentExists(String),
    #[error("execution halted after {completed} completed steps")]
    Halted { completed: usize },
    #[error("recipe has no network services")]
    NoNetworkServices,
    #[error("deployment {deployment_id} failed at {failed:?}")]
    DeploymentFailed {
        deployment_id: String,
        failed: Vec<String>,
    },
    #[error("corrupt record at {0}")]
    Corrupt(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Parses and validates a recipe document, reporting every violation.
pub fn parse_recipe(document: &Document) -> Result<DeploymentRecipe, RecipeError> {
    let recipe: DeploymentRecipe =
        serde_path_to_error::deserialize(document.clone()).map_err(|e| RecipeError::Parse {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
    let violations = recipe.violations();
    if violations.is_empty() {
        Ok(recipe)
    } else {
        Err(RecipeError::Validation(violations))
    }
}

pub fn parse_recipe_str(text: &str) -> Result<DeploymentRecipe, RecipeError> {
    let doc: Document = serde_json::from_str(text).map_err(|e| RecipeError::Parse {
        path: ".".into(),
        reason: e.to_string(),
    })?;
    parse_recipe(&doc)
}

fn dep_key(deployment_id: &str, leaf: &str) -> Result<StateKey, StoreError> {
    Ok(StateKey::from_segments(["deploy", deployment_id, leaf])?)
}

pub(crate) fn step_key(deployment_id: &str, step_id: &str) -> Result<StateKey, StoreError> {
    Ok(StateKey::from_segments(["deploy", deployment_id, "steps", step_id])?)
}

/// Runs deployments against one harness. All runs share the harness
/// clock, so they are serialised.
pub struct RecipeEngine {
    fw: ServiceFramework,
    harness: Harness,
    run_lock: Mutex<()>,
}

impl std::fmt::Debug for RecipeEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecipeEngine").finish_non_exhaustive()
    }
}

impl RecipeEngine {
    pub fn new(fw: ServiceFramework, harness: Harness) -> Self {
        harness.attach_store(fw.store().clone());
        Self {
            fw,
            harness,
            run_lock: Mutex::new(()),
        }
    }

    /// An engine with its own store and bus on the harness clock.
    pub fn standalone(harness: Harness) -> Self {
        let store = StateStore::new(harness.clock().clone());
        let bus = MessageBus::new(harness.clock().clone(), 0);
        let fw = ServiceFramework::new(store, bus, std::sync::Arc::new(harness.clone()));
        Self::new(fw, harness)
    }

    pub fn store(&self) -> &StateStore {
        self.fw.store()
    }

    pub fn framework(&self) -> &ServiceFramework {
        &self.fw
    }

    pub fn harness(&self) -> &Harness {
        &self.harness
    }

    pub(crate) fn set_status(&self, deployment_id: &str, status: DeploymentStatus) -> Result<(), RecipeError> {
        self.store()
            .put(&dep_key(deployment_id, "status")?, status.as_str(), None)?;
        Ok(())
    }

    pub fn status(&self, deployment_id: &str) -> Result<DeploymentStatus, RecipeError> {
        let key = dep_key(deployment_id, "status")?;
        let entry = self
            .store()
            .get(&key)
            .ok_or_else(|| RecipeError::UnknownDeployment(deployment_id.to_string()))?;
        entry
            .value_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RecipeError::Corrupt(key.render()))
    }

    /// Deployment ids with a stored plan, in id order.
    pub fn deployments(&self) -> Vec<String> {
        let prefix = StateKey::parse("deploy").expect("static key");
        let mut ids: Vec<String> = self
            .store()
            .list(&prefix)
            .into_iter()
            .filter(|e| e.key.segments().len() == 3 && e.key.last() == "plan")
            .map(|e| e.key.segments()[1].clone())
            .collect();
        ids.dedup();
        ids
    }

    pub fn plan_of(&self, deployment_id: &str) -> Result<DeploymentPlan, RecipeError> {
        let key = dep_key(deployment_id, "plan")
            .map_err(|_| RecipeError::UnknownDeployment(deployment_id.to_string()))?;
        let entry = self
            .store()
            .get(&key)
            .ok_or_else(|| RecipeError::UnknownDeployment(deployment_id.to_string()))?;
        serde_json::from_slice(&entry.value).map_err(|_| RecipeError::Corrupt(key.render()))
    }

    fn records(&self, plan: &DeploymentPlan) -> Result<BTreeMap<String, StepRecord>, RecipeError> {
        let mut out = BTreeMap::new();
        for s in &plan.steps {
            let key = step_key(&plan.deployment_id, &s.step_id)?;
            if let Some(e) = self.store().get(&key) {
                let r: StepRecord =
                    serde_json::from_slice(&e.value).map_err(|_| RecipeError::Corrupt(key.render()))?;
                out.insert(s.step_id.clone(), r);
            }
        }
        Ok(out)
    }

    /// Validates, plans and persists a recipe without running it.
    pub fn submit(&self, recipe: &DeploymentRecipe) -> Result<DeploymentPlan, RecipeError> {
        let violations = recipe.violations();
        if !violations.is_empty() {
            return Err(RecipeError::Validation(violations));
        }
        let plan = plan(recipe);
        let plan_key = dep_key(&plan.deployment_id, "plan")?;
        let value = serde_json::to_vec(&plan).expect("plan serialises");
        match self.store().put(&plan_key, value, Some(0)) {
            Ok(_) => {}
            Err(StoreError::VersionConflict { .. }) => {
                return Err(RecipeError::DeploymentExists(plan.deployment_id.clone()))
            }
            Err(e) => return Err(e.into()),
        }
        let recipe_value = serde_json::to_vec(recipe).expect("recipe serialises");
        self.store()
            .put(&dep_key(&plan.deployment_id, "recipe")?, recipe_value, None)?;
        Ok(plan)
    }

    /// Submits and runs a recipe to completion.
    pub fn deploy(&self, recipe: &DeploymentRecipe) -> Result<DeploymentReport, RecipeError> {
        self.deploy_with(recipe, ExecOptions::default())
    }

    pub fn deploy_with(
        &self,
        recipe: &DeploymentRecipe,
        options: ExecOptions,
    ) -> Result<DeploymentReport, RecipeError> {
        let plan = self.submit(recipe)?;
        self.execute_with(&plan, options)
    }

    /// Runs a plan from scratch. The plan is persisted first if the store
    /// does not hold it yet.
    pub fn execute(&self, plan: &DeploymentPlan) -> Result<DeploymentReport, RecipeError> {
        self.execute_with(plan, ExecOptions::default())
    }

    pub fn execute_with(
        &self,
        plan: &DeploymentPlan,
        options: ExecOptions,
    ) -> Result<DeploymentReport, RecipeError> {
        let _run = self.run_lock.lock();
        let plan_key = dep_key(&plan.deployment_id, "plan")?;
        match self.store().get(&plan_key) {
            None => {
                let value = serde_json::to_vec(plan).expect("plan serialises");
                self.store().put(&plan_key, value, Some(0))?;
            }
            Some(_) if !self.records(plan)?.is_empty() => {
                return Err(RecipeError::DeploymentExists(plan.deployment_id.clone()))
            }
            Some(_) => {}
        }
        execute::Executor::new(self, plan, BTreeMap::new(), options).run()
    }

    /// Continues a deployment from its persisted step records. Completed
    /// steps are kept; everything else runs again.
    pub fn resume(&self, deployment_id: &str) -> Result<DeploymentReport, RecipeError> {
        self.resume_with(deployment_id, ExecOptions::default())
    }

    pub fn resume_with(
        &self,
        deployment_id: &str,
        options: ExecOptions,
    ) -> Result<DeploymentReport, RecipeError> {
        let _run = self.run_lock.lock();
        let plan = self.plan_of(deployment_id)?;
        let records = self.records(&plan)?;
        let all_done = plan
            .steps
            .iter()
            .all(|s| records.get(&s.step_id).is_some_and(|r| r.outcome == StepOutcome::Done));
        if all_done {
            return Ok(DeploymentReport::build(&plan, &records, DeploymentStatus::Done));
        }
        let kept: BTreeMap<String, StepRecord> = records
            .into_iter()
            .filter(|(_, r)| r.outcome == StepOutcome::Done)
            .collect();
        for s in plan.steps_of_kind(StepKind::NetServiceDeploy) {
            if !kept.contains_key(&s.step_id) {
                let t = serde_json::from_value(serde_json::json!(s.target))
                    .map_err(|_| RecipeError::Corrupt(s.step_id.clone()))?;
                self.fw
                    .set_service_status(deployment_id, t, LifecycleState::Deploying)
                    .map_err(|e| RecipeError::Corrupt(e.to_string()))?;
            }
        }
        log::info!(
            "resuming {deployment_id}: {} of {} steps already done",
            kept.len(),
            plan.steps.len()
        );
        execute::Executor::new(self, &plan, kept, options).run()
    }

    /// Rebuilds the report of a deployment from the store.
    pub fn report(&self, deployment_id: &str) -> Result<DeploymentReport, RecipeError> {
        let plan = self.plan_of(deployment_id)?;
        let records = self.records(&plan)?;
        let status = self.status(deployment_id).unwrap_or(DeploymentStatus::Running);
        Ok(DeploymentReport::build(&plan, &records, status))
    }
}
