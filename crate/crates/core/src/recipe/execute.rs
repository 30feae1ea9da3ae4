//! Discrete-event execution of a plan on the harness.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use super::plan::{DeploymentPlan, PlanStep, StepKind};
use super::report::{DeploymentReport, DeploymentStatus, StepOutcome, StepRecord};
use super::{RecipeEngine, RecipeError};
use crate::clock::{EventQueue, Tick};
use crate::harness::{HarnessError, NodeRequest};
use crate::net::vpn::{plan_vpn, MemberNode};
use crate::net::{self, NetError};
use crate::recipe::model::DeploymentRecipe;
use crate::service::{status_key, LifecycleState, ServiceType};
use crate::store::{StateStore, Wait, WaitStatus};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Stop, as if the process died, once this many steps have completed
    /// in this run. Records of steps still in flight stay RUNNING.
    pub halt_after: Option<usize>,
}

enum Event {
    Finish(String),
    Deadline,
}

pub(super) struct Executor<'a> {
    engine: &'a RecipeEngine,
    plan: &'a DeploymentPlan,
    records: BTreeMap<String, StepRecord>,
    dependents: BTreeMap<String, Vec<String>>,
    queue: EventQueue<Event>,
    barriers: BTreeMap<String, Wait>,
    completed: usize,
    options: ExecOptions,
}

impl<'a> Executor<'a> {
    pub(super) fn new(
        engine: &'a RecipeEngine,
        plan: &'a DeploymentPlan,
        records: BTreeMap<String, StepRecord>,
        options: ExecOptions,
    ) -> Self {
        let dependents = plan
            .dependents()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.into_iter().map(str::to_string).collect()))
            .collect();
        Self {
            engine,
            plan,
            records,
            dependents,
            queue: EventQueue::new(engine.harness().clock().clone()),
            barriers: BTreeMap::new(),
            completed: 0,
            options,
        }
    }

    fn store(&self) -> &StateStore {
        self.engine.store()
    }

    fn now(&self) -> Tick {
        self.engine.harness().now()
    }

    fn outcome(&self, step_id: &str) -> StepOutcome {
        self.records
            .get(step_id)
            .map_or(StepOutcome::Pending, |r| r.outcome)
    }

    fn persist(&mut self, step_id: &str, record: StepRecord) -> Result<(), RecipeError> {
        let key = super::step_key(&self.plan.deployment_id, step_id)?;
        let value = serde_json::to_vec(&record).expect("record serialises");
        self.store().put(&key, value, None)?;
        self.records.insert(step_id.to_string(), record);
        Ok(())
    }

    fn halted(&self) -> bool {
        self.options
            .halt_after
            .is_some_and(|n| self.completed >= n)
    }

    pub(super) fn run(mut self) -> Result<DeploymentReport, RecipeError> {
        let dep = self.plan.deployment_id.clone();
        self.engine.set_status(&dep, DeploymentStatus::Running)?;
        if self.halted() {
            return Err(RecipeError::Halted { completed: 0 });
        }
        self.start_ready()?;
        while !self.halted() {
            let Some((_, event)) = self.queue.pop() else {
                break;
            };
            match event {
                Event::Finish(step_id) => self.finish(&step_id)?,
                Event::Deadline => {}
            }
            if self.halted() {
                break;
            }
            self.poll_barriers()?;
            self.start_ready()?;
        }
        let unfinished = self.plan.steps.iter().any(|s| {
            matches!(self.outcome(&s.step_id), StepOutcome::Pending | StepOutcome::Running)
        });
        if self.halted() && unfinished {
            return Err(RecipeError::Halted {
                completed: self.completed,
            });
        }
        let failed = self
            .records
            .values()
            .any(|r| matches!(r.outcome, StepOutcome::Failed | StepOutcome::Skipped));
        let status = if failed {
            DeploymentStatus::Failed
        } else {
            DeploymentStatus::Done
        };
        self.engine.set_status(&dep, status)?;
        Ok(DeploymentReport::build(self.plan, &self.records, status))
    }

    /// Starts every pending step whose dependencies are done, repeating
    /// until nothing changes (steps may complete as they begin).
    fn start_ready(&mut self) -> Result<(), RecipeError> {
        loop {
            if self.halted() {
                return Ok(());
            }
            let next = self.plan.steps.iter().find(|s| {
                self.outcome(&s.step_id) == StepOutcome::Pending
                    && s.depends_on
                        .iter()
                        .all(|d| self.outcome(d) == StepOutcome::Done)
            });
            match next {
                Some(step) => self.begin(step)?,
                None => return Ok(()),
            }
        }
    }

    fn begin(&mut self, step: &'a PlanStep) -> Result<(), RecipeError> {
        let now = self.now();
        self.persist(
            &step.step_id,
            StepRecord {
                outcome: StepOutcome::Running,
                start_tick: Some(now),
                end_tick: None,
                detail: None,
            },
        )?;
        self.engine
            .harness()
            .record("step.start", &step.step_id, json!({"kind": step.kind}));
        if self.engine.harness().take_step_fault(step.kind, &step.target) {
            return self.complete(step, StepOutcome::Failed, Some("injected fault".into()));
        }
        let recipe = &self.plan.recipe;
        let harness = self.engine.harness();
        match step.kind {
            StepKind::Provision => {
                let node = self.plan.node(&step.target).expect("plan nodes cover steps");
                let req = NodeRequest {
                    node_id: node.node_id.clone(),
                    cloud_id: node.cloud_id.clone(),
                    deployment_id: self.plan.deployment_id.clone(),
                    roles: node.roles.clone(),
                    public: node.public,
                };
                match harness.provision_node(&req) {
                    Ok(ready_at) => self
                        .queue
                        .schedule_at(ready_at.max(now), Event::Finish(step.step_id.clone())),
                    Err(e) => return self.complete(step, StepOutcome::Failed, Some(e.to_string())),
                }
            }
            StepKind::AgentBoot => {
                let up = harness
                    .node(&step.target)
                    .is_some_and(|n| n.agent_state == crate::harness::AgentState::Up);
                let delay = if up { 0 } else { harness.agent_boot_latency() };
                self.queue
                    .schedule_in(delay, Event::Finish(step.step_id.clone()));
            }
            StepKind::NetServiceDeploy => {
                let t = service_of(step);
                let d = match t {
                    ServiceType::Vpn => net::vpn_duration(harness),
                    ServiceType::Firewall => net::firewall_duration(harness),
                    _ => net::lb_duration(harness),
                };
                self.queue.schedule_in(d, Event::Finish(step.step_id.clone()));
            }
            StepKind::BarrierWait => {
                let t = step.service.expect("barriers name their service");
                let key = status_key(&self.plan.deployment_id, t)?;
                let wait = self.store().wait_for(
                    &key,
                    |v| v == b"READY" || v == b"FAILED",
                    harness.barrier_timeout(),
                )?;
                self.queue.schedule_at(wait.deadline(), Event::Deadline);
                self.barriers.insert(step.step_id.clone(), wait);
                self.poll_barriers()?;
            }
            StepKind::ComponentDeployScript | StepKind::ComponentAppScript => {
                let node = self.plan.node(&step.target).expect("plan nodes cover steps");
                let comp = recipe
                    .components
                    .iter()
                    .find(|c| c.name == node.component)
                    .expect("node component exists");
                let d = if step.kind == StepKind::ComponentDeployScript {
                    comp.deploy_duration()
                } else {
                    comp.app_duration()
                };
                self.queue.schedule_in(d, Event::Finish(step.step_id.clone()));
            }
        }
        Ok(())
    }

    fn finish(&mut self, step_id: &str) -> Result<(), RecipeError> {
        let step = self.plan.step(step_id).expect("scheduled steps exist");
        let harness = self.engine.harness();
        let result: Result<(), String> = match step.kind {
            StepKind::AgentBoot => match harness.boot_agent(&step.target) {
                Ok(()) | Err(HarnessError::AlreadyUp(_)) => Ok(()),
                Err(e) => Err(e.to_string()),
            },
            StepKind::NetServiceDeploy => self.apply_service(step).map_err(|e| e.to_string()),
            _ => Ok(()),
        };
        match result {
            Ok(()) => self.complete(step, StepOutcome::Done, None),
            Err(e) => self.complete(step, StepOutcome::Failed, Some(e)),
        }
    }

    fn apply_service(&self, step: &PlanStep) -> Result<(), NetError> {
        let t = service_of(step);
        let dep = self.plan.deployment_id.as_str();
        let spec = self
            .plan
            .recipe
            .network_services
            .iter()
            .find(|s| s.service_type == t)
            .expect("planned service is in the recipe");
        let attached: Vec<String> = DeploymentRecipe::attached_nodes(&self.plan.nodes, &spec.attach_roles)
            .map(|n| n.node_id.clone())
            .collect();
        let fw = self.engine.framework();
        let harness = self.engine.harness();
        match t {
            ServiceType::Vpn => {
                let params = spec.vpn_params().map_err(NetError::InvalidParams)?;
                let members: Vec<MemberNode> = DeploymentRecipe::attached_nodes(&self.plan.nodes, &spec.attach_roles)
                    .map(|n| MemberNode {
                        node_id: n.node_id.clone(),
                        roles: n.roles.clone(),
                        underlay_address: harness.node(&n.node_id).map(|h| h.underlay_address),
                    })
                    .collect();
                let overlay = plan_vpn(dep, &members, params.subnet, &params.server_role)
                    .map_err(|e| NetError::InvalidParams(e.to_string()))?;
                net::apply_vpn(&overlay, fw, harness).map(drop)
            }
            ServiceType::Firewall => {
                let policy = spec.firewall_policy().map_err(NetError::InvalidParams)?;
                net::apply_firewall(dep, &policy, &attached, fw, harness).map(drop)
            }
            _ => {
                let params = spec.lb_params().map_err(NetError::InvalidParams)?;
                net::apply_lb(dep, &params, &attached, fw).map(drop)
            }
        }
    }

    fn complete(
        &mut self,
        step: &PlanStep,
        outcome: StepOutcome,
        detail: Option<String>,
    ) -> Result<(), RecipeError> {
        let now = self.now();
        let start = self.records.get(&step.step_id).and_then(|r| r.start_tick);
        if outcome == StepOutcome::Failed {
            log::warn!("step {} failed: {}", step.step_id, detail.as_deref().unwrap_or(""));
        }
        // A failed service must still release the barriers waiting on it.
        if step.kind == StepKind::NetServiceDeploy && outcome != StepOutcome::Done {
            self.mark_service_failed(step)?;
        }
        self.persist(
            &step.step_id,
            StepRecord {
                outcome,
                start_tick: start,
                end_tick: Some(now),
                detail,
            },
        )?;
        self.engine.harness().record(
            "step.end",
            &step.step_id,
            json!({"outcome": outcome}),
        );
        self.completed += 1;
        if outcome == StepOutcome::Failed {
            self.skip_dependents(&step.step_id)?;
        }
        Ok(())
    }

    fn mark_service_failed(&self, step: &PlanStep) -> Result<(), RecipeError> {
        let key = status_key(&self.plan.deployment_id, service_of(step))?;
        self.store().put(&key, LifecycleState::Failed.as_str(), None)?;
        Ok(())
    }

    fn skip_dependents(&mut self, step_id: &str) -> Result<(), RecipeError> {
        let mut stack = vec![step_id.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(id) = stack.pop() {
            for d in self.dependents.get(&id).cloned().unwrap_or_default() {
                if !seen.insert(d.clone()) || self.outcome(&d) != StepOutcome::Pending {
                    continue;
                }
                let step = self.plan.step(&d).expect("dependents are plan steps");
                if step.kind == StepKind::NetServiceDeploy {
                    self.mark_service_failed(step)?;
                }
                self.persist(
                    &d,
                    StepRecord {
                        outcome: StepOutcome::Skipped,
                        start_tick: None,
                        end_tick: None,
                        detail: Some(format!("dependency {id} did not complete")),
                    },
                )?;
                stack.push(d);
            }
        }
        Ok(())
    }

    fn poll_barriers(&mut self) -> Result<(), RecipeError> {
        let ids: Vec<String> = self.barriers.keys().cloned().collect();
        for id in ids {
            if self.halted() {
                return Ok(());
            }
            let status = self.barriers.get_mut(&id).expect("listed").poll();
            let (outcome, detail) = match status {
                WaitStatus::Pending => continue,
                WaitStatus::Ready(e) if e.value == b"READY" => (StepOutcome::Done, None),
                WaitStatus::Ready(_) => (StepOutcome::Failed, Some("network service FAILED".to_string())),
                WaitStatus::TimedOut { deadline } => {
                    (StepOutcome::Failed, Some(format!("timed out at tick {deadline}")))
                }
            };
            self.barriers.remove(&id);
            let step = self.plan.step(&id).expect("barrier steps exist");
            self.complete(step, outcome, detail)?;
        }
        Ok(())
    }
}

fn service_of(step: &PlanStep) -> ServiceType {
    match step.kind {
        StepKind::BarrierWait => step.service.expect("barriers name their service"),
        _ => serde_json::from_value(json!(step.target)).expect("netsvc target is a service type"),
    }
}
