//! Transport-independent handler for the policy agent's HTTP API.
//!
//! - `GET /v1/data/{policy_type}/{key...}` returns `{"result": <data>}`.
//!   Unlisted but valid keys return the policy default, not an error.
//! - `POST /v1/evaluate` takes `{"policy": ..., "input": {...}}` and returns
//!   `{"result": {"allowed": bool, "reason": str}}` with status 200, whether
//!   the query was allowed or denied.
//!
//! Errors are `{"error": <code>, "message": <text>}`; 400 for malformed
//! input, 404 for unknown routes, policy types and keys.

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    get_data_by_name, is_allowed, iot_locality_allows, ms_locality_allows, PolicyDecision,
    PolicyError, PolicySet, PolicyType,
};
use crate::topology::InfrastructureGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(result: Value) -> Self {
        Self {
            status: 200,
            body: json!({ "result": result }),
        }
    }

    fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": code, "message": message.into() }),
        }
    }

    /// Compact JSON with keys in sorted order.
    pub fn canonical_body(&self) -> String {
        serde_json::to_string(&self.body).expect("json values always serialize")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateRequest {
    policy: String,
    input: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RestrictionInput {
    microservice: String,
    domain: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IotInput {
    microservice: String,
    device_domain: String,
    domain: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MsInput {
    consumer: String,
    consumed: String,
    consumer_domain: String,
    domain: String,
}

/// Read-only policy agent over one application's policies.
#[derive(Debug, Clone)]
pub struct PolicyApi {
    set: PolicySet,
    graph: InfrastructureGraph,
}

impl PolicyApi {
    pub fn new(set: PolicySet, graph: InfrastructureGraph) -> Self {
        Self { set, graph }
    }

    pub fn policies(&self) -> &PolicySet {
        &self.set
    }

    pub fn handle(&self, method: &str, path: &str, body: &[u8]) -> ApiResponse {
        let path = path.split('?').next().unwrap_or_default();
        if let Some(rest) = path.strip_prefix("/v1/data/") {
            return match method {
                "GET" => self.data(rest),
                _ => ApiResponse::error(405, "method_not_allowed", format!("{method} {path}")),
            };
        }
        if path == "/v1/evaluate" {
            return match method {
                "POST" => self.evaluate(body),
                _ => ApiResponse::error(405, "method_not_allowed", format!("{method} {path}")),
            };
        }
        ApiResponse::error(404, "not_found", format!("no route for {path}"))
    }

    /// `path` is everything after `/v1/data/`.
    pub fn data(&self, path: &str) -> ApiResponse {
        let mut segments = path.split('/');
        let policy_type = segments.next().unwrap_or_default();
        let key: Vec<&str> = segments.collect();
        match get_data_by_name(&self.set, policy_type, &key) {
            Ok(data) => ApiResponse::ok(data.to_json()),
            Err(e) => error_response(&e, true),
        }
    }

    pub fn evaluate(&self, body: &[u8]) -> ApiResponse {
        let req: EvaluateRequest = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => return ApiResponse::error(400, "malformed_body", e.to_string()),
        };
        let policy: PolicyType = match req.policy.parse() {
            Ok(p) => p,
            Err(e) => return error_response(&e, false),
        };
        let decision = match policy {
            PolicyType::PlacementRestriction => parse_input::<RestrictionInput>(req.input)
                .and_then(|i| {
                    is_allowed(&self.set, &i.microservice, &i.domain)
                        .map_err(|e| error_response(&e, false))
                }),
            PolicyType::IotLocality => parse_input::<IotInput>(req.input).and_then(|i| {
                iot_locality_allows(&self.set, &self.graph, &i.microservice, &i.device_domain, &i.domain)
                    .map_err(|e| error_response(&e, false))
            }),
            PolicyType::MsLocality => parse_input::<MsInput>(req.input).and_then(|i| {
                ms_locality_allows(
                    &self.set,
                    &self.graph,
                    &i.consumer,
                    &i.consumed,
                    &i.consumer_domain,
                    &i.domain,
                )
                .map_err(|e| error_response(&e, false))
            }),
        };
        match decision {
            Ok(d) => ApiResponse::ok(decision_json(&d)),
            Err(resp) => resp,
        }
    }
}

pub fn decision_json(d: &PolicyDecision) -> Value {
    json!({ "allowed": d.allowed, "reason": d.reason })
}

fn parse_input<T: serde::de::DeserializeOwned>(input: Value) -> Result<T, ApiResponse> {
    serde_json::from_value(input).map_err(|e| ApiResponse::error(400, "malformed_input", e.to_string()))
}

fn error_response(e: &PolicyError, data_route: bool) -> ApiResponse {
    let (status, code) = match e {
        PolicyError::UnknownPolicyType(_) if data_route => (404, "unknown_policy_type"),
        PolicyError::UnknownPolicyType(_) => (400, "unknown_policy_type"),
        PolicyError::UnknownMicroservice(_) if data_route => (404, "unknown_key"),
        PolicyError::UnknownMicroservice(_) => (400, "unknown_microservice"),
        PolicyError::UnknownDomain(_) => (400, "unknown_domain"),
        PolicyError::MalformedKey { .. } => (400, "malformed_key"),
        _ => (400, "invalid_query"),
    };
    ApiResponse::error(status, code, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appmodel::{tests::chain_doc, validate_app};
    use crate::policy::{parse_policies, tests::uav_policies_doc};
    use crate::topology::{load_topology, tests::uav_doc};

    fn api() -> PolicyApi {
        let g = load_topology(&uav_doc()).unwrap();
        let app = validate_app(&chain_doc()).unwrap();
        let set = parse_policies(&uav_policies_doc(), &app, &g).unwrap();
        PolicyApi::new(set, g)
    }

    #[test]
    fn data_endpoint() {
        let api = api();
        let r = api.handle("GET", "/v1/data/iot_locality/m2", b"");
        assert_eq!(r.status, 200);
        assert_eq!(r.canonical_body(), r#"{"result":"StrictDomain"}"#);

        let r = api.handle("GET", "/v1/data/ms_locality/m4/m5", b"");
        assert_eq!(r.canonical_body(), r#"{"result":"Global"}"#);

        let r = api.handle("GET", "/v1/data/placement_restriction/m2", b"");
        assert_eq!(
            r.canonical_body(),
            r#"{"result":{"domains":["ED3","ED4"],"mode":"allow"}}"#
        );

        let r = api.handle("GET", "/v1/data/placement_restriction/m5", b"");
        assert_eq!(
            r.canonical_body(),
            r#"{"result":{"domains":[],"mode":"unrestricted"}}"#
        );

        let r = api.handle("GET", "/v1/data/placement_restriction/m42", b"");
        assert_eq!(r.status, 404);
        assert_eq!(r.body["error"], "unknown_key");

        let r = api.handle("GET", "/v1/data/bogus/m2", b"");
        assert_eq!(r.status, 404);

        let r = api.handle("GET", "/v1/data/ms_locality/m4", b"");
        assert_eq!(r.status, 400);
    }

    #[test]
    fn evaluate_endpoint() {
        let api = api();
        let body = br#"{"policy":"placement_restriction","input":{"microservice":"m2","domain":"Cloud"}}"#;
        let r = api.handle("POST", "/v1/evaluate", body);
        assert_eq!(r.status, 200);
        assert_eq!(r.body["result"]["allowed"], false);
        assert_eq!(
            r.body["result"]["reason"],
            "restriction: m2 allow-list excludes Cloud"
        );

        let body = br#"{"policy":"ms_locality","input":{"consumer":"m2","consumed":"m3","consumer_domain":"ED4","domain":"ED3"}}"#;
        let r = api.handle("POST", "/v1/evaluate", body);
        assert_eq!(r.body["result"]["allowed"], true);
    }

    #[test]
    fn malformed_requests_are_400() {
        let api = api();
        for body in [
            &b"{not json"[..],
            br#"{"policy":"placement_restriction"}"#,
            br#"{"policy":"placement_restriction","input":{"microservice":"m2"}}"#,
            br#"{"policy":"placement_restriction","input":{"microservice":"m2","domain":"X"}}"#,
            br#"{"policy":"nope","input":{}}"#,
        ] {
            assert_eq!(api.handle("POST", "/v1/evaluate", body).status, 400);
        }
        assert_eq!(api.handle("GET", "/v1/evaluate", b"").status, 405);
        assert_eq!(api.handle("GET", "/v2/x", b"").status, 404);
    }
}
