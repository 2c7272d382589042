//! Built-in scenarios through the CLI: valid bundles, byte-identical reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use agency_core::session::scenario::builtin_names;
use agency_core::workspace::load_workspace;
use serde_json::Value;

use super::{ensure, fail, run_cli, Check};

fn files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<(), String> {
    for e in fs::read_dir(dir).map_err(fail("read_dir"))? {
        let p = e.map_err(fail("dir entry"))?.path();
        if p.is_dir() {
            files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).map_err(fail("prefix"))?.to_string_lossy().into_owned();
            out.insert(rel, fs::read(&p).map_err(fail("read"))?);
        }
    }
    Ok(())
}

fn run_once(name: &str, out: &Path) -> Result<(Value, BTreeMap<String, Vec<u8>>), String> {
    let stdout = run_cli(&["--seed", "7", "--out", out.to_str().ok_or("non-utf8 path")?, "scenario", name])?;
    let summary: Value = serde_json::from_str(&stdout).map_err(fail("scenario summary"))?;
    let mut all = BTreeMap::new();
    files(out, out, &mut all)?;
    Ok((summary, all))
}

pub fn run() -> Check {
    let tmp = tempfile::tempdir().map_err(fail("tempdir"))?;
    let mut shown = Vec::new();
    let names = builtin_names();
    for want in ["summarize", "crop-map", "flood"] {
        ensure!(names.contains(&want), "scenario `{want}` is not built in");
    }
    for name in names {
        let (a_dir, b_dir) = (tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b")));
        let (summary, a) = run_once(name, &a_dir)?;
        let (summary_b, b) = run_once(name, &b_dir)?;

        let v = &summary["validity"];
        for flag in ["geometry_valid", "crs_consistent", "schema_valid"] {
            ensure!(v[flag] == Value::Bool(true), "{name}: validity flag {flag} is not true");
        }
        ensure!(summary == summary_b, "{name}: summaries differ between runs");
        ensure!(a.keys().eq(b.keys()), "{name}: file sets differ between runs");
        for (file, bytes) in &a {
            ensure!(b[file] == *bytes, "{name}: {file} differs between runs");
        }

        let ws = load_workspace(&a_dir.join("workspace")).map_err(|e| format!("{name}: bundle does not reload: {e}"))?;
        for layer in ws.vectors.values() {
            for f in layer.iter() {
                f.geometry.validate().map_err(|e| format!("{name}: {}/{} invalid: {e}", layer.name, f.id))?;
            }
        }
        ensure!(
            ws.artifacts.keys().any(|k| k == &format!("report/{name}")),
            "{name}: bundle lacks its report artifact"
        );
        shown.push(format!("{name} ({} files)", a.len()));
    }
    Ok(format!("{} valid, reloadable and byte-identical across two runs", shown.join(", ")))
}
