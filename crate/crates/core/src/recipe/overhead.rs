use serde::{Deserialize, Serialize};

use super::{DeploymentRecipe, DeploymentStatus, RecipeEngine, RecipeError};
use crate::clock::Tick;
use crate::harness::{Harness, Scenario};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub seed: u64,
    pub baseline_duration: Tick,
    pub with_services_duration: Tick,
    /// `with_services_duration - baseline_duration`.
    pub overhead: i64,
    pub baseline_critical_path: Vec<String>,
    pub with_services_critical_path: Vec<String>,
}

fn run(recipe: &DeploymentRecipe, scenario: &Scenario) -> Result<super::DeploymentReport, RecipeError> {
    let engine = RecipeEngine::standalone(Harness::new(scenario.clone()));
    let report = engine.deploy(recipe)?;
    if report.status != DeploymentStatus::Done {
        return Err(RecipeError::DeploymentFailed {
            deployment_id: recipe.deployment_id.clone(),
            failed: report.failed_steps().into_iter().map(str::to_string).collect(),
        });
    }
    Ok(report)
}

/// Deploys `recipe` twice on fresh harnesses built from `scenario`, once
/// without its network services and once in full, and compares the total
/// durations.
pub fn measure_overhead(
    recipe: &DeploymentRecipe,
    scenario: &Scenario,
) -> Result<OverheadReport, RecipeError> {
    if recipe.network_services.is_empty() {
        return Err(RecipeError::NoNetworkServices);
    }
    let mut baseline_recipe = recipe.clone();
    baseline_recipe.network_services.clear();
    let baseline = run(&baseline_recipe, scenario)?;
    let full = run(recipe, scenario)?;
    Ok(OverheadReport {
        seed: scenario.seed,
        baseline_duration: baseline.total_duration,
        with_services_duration: full.total_duration,
        overhead: full.total_duration as i64 - baseline.total_duration as i64,
        baseline_critical_path: baseline.critical_path,
        with_services_critical_path: full.critical_path,
    })
}
