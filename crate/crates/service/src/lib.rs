//! HTTP/JSON boundary for agency sessions.
//!
//! Every endpoint lives under `/v1` and is listed in `api/schema.json`.
//! [`server`] hosts sessions behind an axum router; [`client::HttpDriver`]
//! drives one of them remotely through the same [`SessionDriver`] trait the
//! in-process engine implements, so scripted actors run unchanged over HTTP.
//!
//! [`SessionDriver`]: agency_core::session::SessionDriver

pub mod client;
mod error;
mod layers;
pub mod server;

pub use client::HttpDriver;
pub use error::ApiError;
pub use server::{router, serve, spawn, AppState, Running};

/// Header carrying the actor token handed out when a session is created.
pub const ACTOR_HEADER: &str = "x-agency-actor";

/// The committed endpoint schema.
pub const SCHEMA_JSON: &str = include_str!("../../../api/schema.json");

/// Method and path template of every `/v1` route the router serves.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/v1/health"),
    ("GET", "/v1/schema"),
    ("POST", "/v1/sessions"),
    ("GET", "/v1/sessions/{id}/state"),
    ("POST", "/v1/sessions/{id}/actions"),
    ("GET", "/v1/sessions/{id}/layers/{name}"),
    ("GET", "/v1/sessions/{id}/suggestions"),
    ("POST", "/v1/sessions/{id}/suggestions/decide"),
    ("POST", "/v1/sessions/{id}/features"),
    ("POST", "/v1/sessions/{id}/propagate"),
    ("POST", "/v1/sessions/{id}/graphs"),
    ("POST", "/v1/sessions/{id}/graphs/{hash}/run"),
    ("POST", "/v1/sessions/{id}/dual-loop/step"),
    ("GET", "/v1/sessions/{id}/memory"),
    ("POST", "/v1/sessions/{id}/memory/{entry}/curate"),
    ("GET", "/v1/sessions/{id}/metrics/live"),
    ("GET", "/v1/sessions/{id}/metrics"),
    ("GET", "/v1/sessions/{id}/ledger"),
    ("GET", "/v1/sessions/{id}/log"),
    ("POST", "/v1/sessions/{id}/done"),
];
