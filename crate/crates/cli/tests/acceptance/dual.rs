//! One dual-model iteration on the easy two-class world, scored here from the
//! exported surface and a regenerated world.

use std::fs;

use agency_core::raster::GridRaster;
use agency_core::session::world::generate_world;
use agency_core::session::dual_run::DualRunConfig;
use serde_json::Value;

use super::{ensure, fail, run_cli, Check};

pub fn run() -> Check {
    let dir = tempfile::tempdir().map_err(fail("tempdir"))?;
    let out = dir.path().to_str().ok_or("non-utf8 temp path")?;
    run_cli(&["--seed", "7", "--out", out, "dual-loop", "--rounds", "1"])?;

    let rounds: Value = serde_json::from_slice(&fs::read(dir.path().join("rounds.json")).map_err(fail("rounds.json"))?)
        .map_err(fail("rounds.json"))?;
    let cfg: DualRunConfig = serde_json::from_value(rounds["config"].clone()).map_err(fail("config"))?;
    ensure!(
        cfg.world.classes.len() == 2
            && cfg.world.sigma == 0.1
            && (cfg.world.width, cfg.world.height) == (32, 32)
            && cfg.seeds == 10
            && cfg.seed == 7,
        "dual-loop did not run the two-class sigma=0.1 32x32 world with 10 seeds at seed 7"
    );

    let surface = GridRaster::from_gridr_bytes(&fs::read(dir.path().join("surface.gridr")).map_err(fail("surface"))?)
        .map_err(fail("surface"))?;
    let world = generate_world(&cfg.world, cfg.seed).map_err(fail("world"))?;
    let truth = &world.scene.slices[0].1;
    let target = &cfg.world.classes[0];
    ensure!(surface.grid() == world.grid, "surface grid differs from the world grid");

    let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
    for i in 0..world.grid.len() {
        let mut best = (f64::NEG_INFINITY, "");
        for b in &surface.bands {
            if b.values[i] > best.0 {
                best = (b.values[i], b.name.as_str());
            }
        }
        let pred = best.1 == target;
        let real = truth[i] == 0;
        match (pred, real) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    ensure!(f1 >= 0.95, "F1 {f1:.4} below 0.95 (tp={tp} fp={fp} fn={fneg})");
    Ok(format!("F1 {f1:.4} after one iteration (tp={tp} fp={fp} fn={fneg})"))
}
