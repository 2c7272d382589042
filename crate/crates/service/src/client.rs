//! Blocking HTTP client that drives a hosted session.

use agency_core::session::{ActionOutcome, EditEvent, MetricsReport, SessionDriver, SessionSpec, SessionView, Step};
use agency_core::vector::VectorLayer;
use agency_core::{Error, Result};
use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::decode;
use crate::server::SessionHandle;
use crate::ACTOR_HEADER;

/// Implements [`SessionDriver`] against a running service. Must not be used
/// from inside an async runtime.
pub struct HttpDriver {
    http: Client,
    base: String,
    id: String,
    actor: String,
    spec: SessionSpec,
}

fn transport(e: reqwest::Error) -> Error {
    Error::Io(format!("http: {e}"))
}

fn send<T: DeserializeOwned>(req: RequestBuilder) -> Result<T> {
    let resp = req.send().map_err(transport)?;
    let status = resp.status();
    let body: Value = resp.json().map_err(transport)?;
    if !status.is_success() {
        return Err(decode(status.as_u16(), &body));
    }
    Ok(serde_json::from_value(body)?)
}

impl HttpDriver {
    /// Creates a session from `spec` on the service at `base` (e.g. `http://127.0.0.1:8080`).
    pub fn create(base: &str, spec: SessionSpec) -> Result<Self> {
        let http = Client::new();
        let base = base.trim_end_matches('/').to_string();
        let created: Value = send(http.post(format!("{base}/v1/sessions")).json(&spec))?;
        let field = |k: &str| {
            created
                .get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::Schema(format!("create response lacks `{k}`")))
        };
        Ok(Self { id: field("id")?, actor: field("actor")?, http, base, spec })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn url(&self, tail: &str) -> String {
        format!("{}/v1/sessions/{}/{tail}", self.base, self.id)
    }

    fn get<T: DeserializeOwned>(&self, tail: &str) -> Result<T> {
        send(self.http.get(self.url(tail)))
    }

    pub fn handle(&self) -> Result<SessionHandle> {
        self.get("state")
    }
}

impl SessionDriver for HttpDriver {
    fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    fn apply(&mut self, step: &Step) -> Result<ActionOutcome> {
        send(self.http.post(self.url("actions")).header(ACTOR_HEADER, &self.actor).json(step))
    }

    fn view(&mut self) -> Result<SessionView> {
        Ok(self.handle()?.view)
    }

    fn vector(&mut self, name: &str) -> Result<VectorLayer> {
        let v: Value = self.get(&format!("layers/{name}"))?;
        VectorLayer::from_geojson(&v, None)
    }

    fn metrics(&mut self) -> Result<MetricsReport> {
        self.get("metrics")
    }

    fn ledger(&mut self) -> Result<Vec<EditEvent>> {
        self.get("ledger")
    }
}
