//! The crop-map scenario over HTTP against the same scenario in process.

use std::net::SocketAddr;

use agency_core::session::harness::user_seed;
use agency_core::session::scenario::{builtin, drive_scenario};
use agency_core::session::{Session, SessionDriver};
use agency_service::{spawn, HttpDriver};

use super::{ensure, fail, Check};

pub fn run() -> Check {
    let script = builtin("crop-map").map_err(fail("crop-map"))?;
    let seed = 7;
    let spec = script.session_spec(seed);
    let user = user_seed(script.user, seed);

    let mut local = Session::new(spec.clone()).map_err(fail("session"))?;
    let local_report = drive_scenario(&mut local, &script, user).map_err(fail("in-process run"))?;
    let local_metrics = local.metrics().map_err(fail("metrics"))?;

    let srv = spawn(SocketAddr::from(([127, 0, 0, 1], 0)), None).map_err(fail("server"))?;
    let mut remote = HttpDriver::create(&srv.base_url(), spec).map_err(fail("create over http"))?;
    let remote_report = drive_scenario(&mut remote, &script, user).map_err(fail("http run"))?;
    let remote_ledger = remote.ledger().map_err(fail("ledger"))?;
    let remote_metrics = remote.metrics().map_err(fail("metrics"))?;
    srv.stop().map_err(fail("stopping server"))?;

    ensure!(!local.ledger().is_empty(), "in-process ledger is empty");
    ensure!(remote_ledger == local.ledger(), "ledgers differ ({} vs {} events)", remote_ledger.len(), local.ledger().len());
    ensure!(remote_metrics == local_metrics, "MetricsReports differ");
    ensure!(remote_report == local_report, "scenario reports differ");
    Ok(format!("{} ledger events and the MetricsReport identical", remote_ledger.len()))
}
