//! Network services manager/orchestrator for federated multi-cloud
//! deployments.
//!
//! The crate is organised around a small micro-service core:
//!
//! - [`store`]: versioned key/value state with watches, barriers and
//!   snapshots. Every other component keeps its state here.
//! - [`bus`]: actor-style messaging with topics, consumer groups and
//!   request/reply correlation.
//! - [`service`]: service descriptors, instances and the lifecycle state
//!   machine, including recursive sub-service launching.
//! - [`net`]: the VPN overlay, firewall and load-balancer services.
//! - [`recipe`]: deployment recipes, plans, execution and crash resume.
//! - [`harness`]: a deterministic multi-cloud world model that all of the
//!   above runs against.
//! - [`agent`]: the northbound entry point tying everything together.

pub mod agent;
pub mod bus;
pub mod clock;
pub mod harness;
pub mod net;
pub mod recipe;
pub mod service;
pub mod store;

pub use agent::{Agent, AgentConfig, AgentError, ApiRequest, ApiResponse};
pub use bus::{Document, Envelope, MessageBus, MessageId, MessageKind};
pub use clock::{Clock, EventQueue, Tick};
pub use harness::{FaultMode, FaultTarget, Harness, Scenario};
pub use net::{
    firewall::{FirewallPolicy, FirewallRule},
    lb::LbPool,
    overlay::SimPacket,
    vpn::OverlayNetwork,
};
pub use recipe::{
    DeploymentPlan, DeploymentRecipe, DeploymentReport, OverheadReport, RecipeEngine, StepKind,
};
pub use service::{LifecycleState, ServiceDescriptor, ServiceFramework, ServiceInstance};
pub use store::{StateEntry, StateKey, StateStore, WatchEvent};
