#![allow(dead_code)]

use std::path::PathBuf;

use netsmo_core::harness::Scenario;
use netsmo_core::recipe::parse_recipe;
use netsmo_core::{DeploymentRecipe, Document};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn fixture_doc(name: &str) -> Document {
    serde_json::from_str(&std::fs::read_to_string(fixture_path(name)).unwrap()).unwrap()
}

pub fn reference_recipe() -> DeploymentRecipe {
    parse_recipe(&fixture_doc("reference-recipe.json")).unwrap()
}

pub fn reference_scenario() -> Scenario {
    Scenario::load(&fixture_path("reference-scenario.json")).unwrap()
}

pub fn service_dominant_scenario() -> Scenario {
    Scenario::load(&fixture_path("service-dominant-scenario.json")).unwrap()
}
