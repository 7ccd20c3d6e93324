//! HTTP front end for the policy agent.

use std::io::Write;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use log::info;

use edgeplane::policy::api::PolicyApi;
use edgeplane::scenario::Scenario;

use crate::{Exit, Failure};

pub fn router(api: PolicyApi) -> Router {
    Router::new().fallback(handle).with_state(Arc::new(api))
}

async fn handle(State(api): State<Arc<PolicyApi>>, method: Method, uri: Uri, body: Bytes) -> Response {
    let r = api.handle(method.as_str(), uri.path(), &body);
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], r.canonical_body()).into_response()
}

/// Binds `bind`, prints the bound address and serves until interrupted.
pub fn serve_blocking(scenario: Scenario, bind: &str, quiet: bool) -> anyhow::Result<Exit> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| Failure::error(Exit::Violation, format!("cannot bind {bind}: {e}")))?;
        let addr = listener.local_addr()?;
        if !quiet {
            println!("listening on {addr}");
            std::io::stdout().flush()?;
        }
        info!("policy agent for `{}` on {addr}", scenario.app.id());
        let app = router(PolicyApi::new(scenario.policies, scenario.graph));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(Exit::Ok)
    })
}
