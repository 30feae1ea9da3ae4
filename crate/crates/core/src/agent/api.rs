//! Northbound request routing.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bus::{Consumer, Document, Envelope, MessageBus};
use crate::recipe::{parse_recipe, ExecOptions, RecipeEngine, RecipeError};
use crate::service::{ServiceDescriptor, ServiceError};
use crate::store::StateKey;

/// Resources served under `/v1/<resource>`, each on bus topic
/// `api/<resource>`.
pub const RESOURCES: [&str; 3] = ["services", "instances", "deployments"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub body: Document,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str, body: Document) -> Self {
        Self {
            method: method.to_string(),
            path: path.to_string(),
            body,
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new("GET", path, Document::Null)
    }

    pub fn post(path: &str, body: Document) -> Self {
        Self::new("POST", path, body)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    /// `{"ok": true, "data": ...}` or
    /// `{"ok": false, "error": {"code": ..., "message": ...}}`.
    pub body: Document,
}

impl ApiResponse {
    pub fn ok(status: u16, data: Document) -> Self {
        Self {
            status,
            body: json!({"ok": true, "data": data}),
        }
    }

    pub fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"ok": false, "error": {"code": code, "message": message.into()}}),
        }
    }

    fn with_details(mut self, details: Document) -> Self {
        self.body["error"]["details"] = details;
        self
    }

    pub fn is_ok(&self) -> bool {
        self.body["ok"] == true
    }

    pub fn data(&self) -> Option<&Document> {
        self.is_ok().then(|| &self.body["data"])
    }

    pub fn error_code(&self) -> Option<&str> {
        self.body["error"]["code"].as_str()
    }

    pub fn error_message(&self) -> Option<&str> {
        self.body["error"]["message"].as_str()
    }

    pub(crate) fn not_found(what: impl Into<String>) -> Self {
        Self::error(404, "NOT_FOUND", what)
    }

    /// Well-formed means `ok` is a bool and the matching member is present.
    pub fn is_well_formed(&self) -> bool {
        match self.body["ok"].as_bool() {
            Some(true) => self.body.get("data").is_some(),
            Some(false) => {
                self.error_code().is_some_and(|c| !c.is_empty()) && self.error_message().is_some()
            }
            None => false,
        }
    }
}

fn service_error(e: ServiceError) -> ApiResponse {
    let msg = e.to_string();
    match e {
        ServiceError::DuplicateService(_) => ApiResponse::error(409, "DUPLICATE_SERVICE", msg),
        ServiceError::InvalidDescriptor(_) => ApiResponse::error(400, "INVALID_DESCRIPTOR", msg),
        ServiceError::UnknownService(_) | ServiceError::UnknownInstance(_) => ApiResponse::not_found(msg),
        ServiceError::UnknownNode(_) => ApiResponse::error(400, "UNKNOWN_NODE", msg),
        ServiceError::MixedDeployments(..) | ServiceError::EmptyPlacement => {
            ApiResponse::error(400, "INVALID_PLACEMENT", msg)
        }
        ServiceError::IllegalTransition { .. } => ApiResponse::error(409, "ILLEGAL_TRANSITION", msg),
        ServiceError::ParentNotActive { .. } => ApiResponse::error(409, "PARENT_NOT_ACTIVE", msg),
        ServiceError::LaunchFailure(_) => ApiResponse::error(502, "LAUNCH_FAILURE", msg),
        ServiceError::ManagementLogic(_) => ApiResponse::error(502, "MANAGEMENT_LOGIC", msg),
        ServiceError::Corrupt(_) | ServiceError::Store(_) => ApiResponse::error(500, "INTERNAL", msg),
    }
}

fn recipe_error(e: RecipeError) -> ApiResponse {
    let msg = e.to_string();
    match e {
        RecipeError::Parse { path, reason } => ApiResponse::error(400, "INVALID_RECIPE", msg)
            .with_details(json!({"path": path, "reason": reason})),
        RecipeError::Validation(v) => ApiResponse::error(422, "RECIPE_VIOLATIONS", msg)
            .with_details(serde_json::to_value(v).unwrap_or_default()),
        RecipeError::UnknownDeployment(_) => ApiResponse::not_found(msg),
        RecipeError::DeploymentExists(_) => ApiResponse::error(409, "DEPLOYMENT_EXISTS", msg),
        RecipeError::NoNetworkServices => ApiResponse::error(400, "NO_NETWORK_SERVICES", msg),
        RecipeError::Halted { .. }
        | RecipeError::DeploymentFailed { .. }
        | RecipeError::Corrupt(_)
        | RecipeError::Store(_) => ApiResponse::error(500, "INTERNAL", msg),
    }
}

fn to_doc<T: Serialize>(v: &T) -> Document {
    serde_json::to_value(v).unwrap_or_default()
}

/// Answers `api/*` requests on the bus.
pub(crate) struct ApiHandler {
    pub(crate) engine: Arc<RecipeEngine>,
    pub(crate) halt_after: Arc<Mutex<Option<usize>>>,
}

impl Consumer for ApiHandler {
    fn deliver(&self, bus: &MessageBus, envelope: Envelope) {
        let resp = match serde_json::from_value::<ApiRequest>(envelope.payload.clone()) {
            Ok(req) => std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| self.route(&req)))
                .unwrap_or_else(|_| ApiResponse::error(500, "INTERNAL", "handler panicked")),
            Err(e) => ApiResponse::error(400, "BAD_REQUEST", e.to_string()),
        };
        let reply = bus.reply_to(&envelope, "core-agent", to_doc(&resp));
        if let Err(e) = bus.publish(reply) {
            log::warn!("reply to {} not sent: {e}", envelope.message_id);
            let fallback = ApiResponse::error(500, "INTERNAL", format!("reply not sent: {e}"));
            let _ = bus.publish(bus.reply_to(&envelope, "core-agent", to_doc(&fallback)));
        }
    }
}

/// Splits `/v1/<resource>/...` into its segments.
pub(crate) fn path_segments(path: &str) -> Option<Vec<&str>> {
    let path = path.split(['?', '#']).next().unwrap_or("");
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    match segs.as_slice() {
        ["v1", resource, ..] if RESOURCES.contains(resource) => Some(segs),
        _ => None,
    }
}

impl ApiHandler {
    fn route(&self, req: &ApiRequest) -> ApiResponse {
        let Some(segs) = path_segments(&req.path) else {
            return ApiResponse::not_found(format!("no route for {}", req.path));
        };
        let method = req.method.to_ascii_uppercase();
        let fw = self.engine.framework();
        match (segs[1], &segs[2..]) {
            ("services", []) => match method.as_str() {
                "GET" => match fw.services() {
                    Ok(list) => ApiResponse::ok(200, to_doc(&list)),
                    Err(e) => service_error(e),
                },
                "POST" => {
                    let desc: ServiceDescriptor = match serde_json::from_value(req.body.clone()) {
                        Ok(d) => d,
                        Err(e) => return ApiResponse::error(400, "INVALID_DESCRIPTOR", e.to_string()),
                    };
                    match fw.register(&desc) {
                        Ok(_) => ApiResponse::ok(201, to_doc(&desc)),
                        Err(e) => service_error(e),
                    }
                }
                _ => method_not_allowed(&method, &req.path),
            },
            ("services", [id]) => match method.as_str() {
                "GET" => match fw.descriptor(id) {
                    Ok(d) => ApiResponse::ok(200, to_doc(&d)),
                    Err(e) => service_error(e),
                },
                _ => method_not_allowed(&method, &req.path),
            },
            ("services", [id, "deploy"]) => {
                if method != "POST" {
                    return method_not_allowed(&method, &req.path);
                }
                let nodes: Vec<String> = match serde_json::from_value(req.body["nodes"].clone()) {
                    Ok(n) => n,
                    Err(e) => return ApiResponse::error(400, "BAD_REQUEST", format!("nodes: {e}")),
                };
                match fw.deploy(id, &nodes) {
                    Ok(out) => ApiResponse::ok(
                        202,
                        json!({
                            "instances": to_doc(&out.instances),
                            "children": to_doc(&out.children),
                            "failures": out.failures.iter().map(|f| json!({
                                "node_id": f.node_id,
                                "instance_id": f.instance_id,
                                "reason": f.reason,
                            })).collect::<Vec<_>>(),
                        }),
                    ),
                    Err(e) => service_error(e),
                }
            }
            ("instances", [iid]) => match method.as_str() {
                "GET" => match fw.status(iid) {
                    Ok(i) => ApiResponse::ok(200, to_doc(&i)),
                    Err(e) => service_error(e),
                },
                _ => method_not_allowed(&method, &req.path),
            },
            ("instances", [iid, action @ ("start" | "stop")]) => {
                if method != "POST" {
                    return method_not_allowed(&method, &req.path);
                }
                let r = if *action == "start" { fw.start(iid) } else { fw.stop(iid) };
                match r {
                    Ok(state) => ApiResponse::ok(200, json!({"instance_id": iid, "state": state})),
                    Err(e) => service_error(e),
                }
            }
            ("deployments", []) => match method.as_str() {
                "GET" => {
                    let list: Vec<Document> = self
                        .engine
                        .deployments()
                        .into_iter()
                        .map(|id| {
                            let status = self.engine.status(&id).ok();
                            json!({"deployment_id": id, "status": status})
                        })
                        .collect();
                    ApiResponse::ok(200, Document::Array(list))
                }
                "POST" => self.submit(&req.body),
                _ => method_not_allowed(&method, &req.path),
            },
            ("deployments", [id]) => match method.as_str() {
                "GET" => {
                    let plan = match self.engine.plan_of(id) {
                        Ok(p) => p,
                        Err(e) => return recipe_error(e),
                    };
                    match self.engine.report(id) {
                        Ok(report) => ApiResponse::ok(
                            200,
                            json!({
                                "deployment_id": id,
                                "status": report.status,
                                "plan": to_doc(&plan),
                                "report": to_doc(&report),
                            }),
                        ),
                        Err(e) => recipe_error(e),
                    }
                }
                _ => method_not_allowed(&method, &req.path),
            },
            ("deployments", [id, "vpn"]) => match method.as_str() {
                "GET" => self.vpn(id),
                _ => method_not_allowed(&method, &req.path),
            },
            _ => ApiResponse::not_found(format!("no route for {}", req.path)),
        }
    }

    fn submit(&self, body: &Document) -> ApiResponse {
        let recipe = match parse_recipe(body) {
            Ok(r) => r,
            Err(e) => return recipe_error(e),
        };
        let halt_after = self.halt_after.lock().take();
        match self
            .engine
            .deploy_with(&recipe, ExecOptions { halt_after })
        {
            Ok(report) => ApiResponse::ok(
                202,
                json!({"deployment_id": recipe.deployment_id, "status": report.status}),
            ),
            // The run stopped at a step boundary; it is resumed at the next boot.
            Err(RecipeError::Halted { completed }) => ApiResponse::ok(
                202,
                json!({"deployment_id": recipe.deployment_id, "status": "RUNNING", "completed_steps": completed}),
            ),
            Err(e) => recipe_error(e),
        }
    }

    fn vpn(&self, id: &str) -> ApiResponse {
        let key = match StateKey::from_segments(["deploy", id, "vpn"]) {
            Ok(k) => k,
            Err(_) => return ApiResponse::not_found(format!("unknown deployment {id}")),
        };
        match self.engine.store().get(&key) {
            Some(e) => match serde_json::from_slice::<Document>(&e.value) {
                Ok(doc) => ApiResponse::ok(200, doc),
                Err(e) => ApiResponse::error(500, "INTERNAL", e.to_string()),
            },
            None if self.engine.plan_of(id).is_ok() => {
                ApiResponse::not_found(format!("deployment {id} has no VPN overlay"))
            }
            None => ApiResponse::not_found(format!("unknown deployment {id}")),
        }
    }
}

fn method_not_allowed(method: &str, path: &str) -> ApiResponse {
    ApiResponse::error(405, "METHOD_NOT_ALLOWED", format!("{method} not allowed on {path}"))
}
