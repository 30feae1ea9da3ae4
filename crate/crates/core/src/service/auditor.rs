use std::collections::HashMap;

use super::{LifecycleState, ServiceInstance};
use crate::store::{StateKey, StateStore, StoreError, Subscription, WatchKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub instance_id: String,
    pub from: Option<LifecycleState>,
    pub to: LifecycleState,
}

/// Watches every instance record in the store and checks each observed state
/// change against the lifecycle graph.
pub struct TransitionAuditor {
    sub: Subscription,
    last: HashMap<String, LifecycleState>,
    log: Vec<Transition>,
    violations: Vec<Transition>,
}

impl TransitionAuditor {
    /// Replays the store's history from the beginning, so an auditor attached
    /// late still sees every transition.
    pub fn new(store: &StateStore) -> Result<Self, StoreError> {
        let prefix = StateKey::parse("deploy").expect("static key");
        Ok(Self {
            sub: store.watch(&prefix, 0)?,
            last: HashMap::new(),
            log: Vec::new(),
            violations: Vec::new(),
        })
    }

    pub fn poll(&mut self) -> Result<(), StoreError> {
        for ev in self.sub.drain()? {
            let segs = ev.entry.key.segments();
            if ev.kind != WatchKind::Put || segs.len() != 4 || segs[2] != "instances" {
                continue;
            }
            let Ok(inst) = serde_json::from_slice::<ServiceInstance>(&ev.entry.value) else {
                continue;
            };
            let prev = self.last.insert(inst.instance_id.clone(), inst.state);
            if prev == Some(inst.state) {
                continue;
            }
            let t = Transition {
                instance_id: inst.instance_id,
                from: prev,
                to: inst.state,
            };
            let legal = match prev {
                None => inst.state == LifecycleState::Registered,
                Some(p) => p.can_transition_to(inst.state),
            };
            if !legal {
                self.violations.push(t.clone());
            }
            self.log.push(t);
        }
        Ok(())
    }

    pub fn log(&self) -> &[Transition] {
        &self.log
    }

    pub fn violations(&self) -> &[Transition] {
        &self.violations
    }

    /// Index in the log where `instance_id` first reached `state`.
    pub fn position(&self, instance_id: &str, state: LifecycleState) -> Option<usize> {
        self.log
            .iter()
            .position(|t| t.instance_id == instance_id && t.to == state)
    }
}
