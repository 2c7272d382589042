//! Random operation graphs: budgeted resume against a single unbudgeted run.

use std::collections::BTreeMap;

use agency_core::geomemory::MemoryStore;
use agency_core::graph::{
    build_graph, execute, node_cost, run_to_completion, Budget, ExecEnv, ExecStatus, GraphNode, GraphSpec, OpKind,
};
use agency_core::geometry::BBox;
use agency_core::perception::{MockOraclePerceptor, PerceptorRegistry, TaskKind};
use agency_core::session::world::{generate_world, World, WorldSpec, CROPLAND_LAYER};
use agency_core::time::TimeStamp;
use agency_core::vector::{Feature, LabelOrigin, LabelStatus, VectorLayer};
use agency_core::workspace::Workspace;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{ensure, fail, Check};

const GRAPHS: u64 = 50;
const SLICES: usize = 3;

#[derive(Clone, Copy, PartialEq)]
enum Ty {
    Raster,
    Json,
    Vector,
    Model,
}

fn world() -> Result<World, String> {
    let spec = WorldSpec { width: 64, height: 64, slices: SLICES, ..WorldSpec::default() };
    let mut w = generate_world(&spec, 64).map_err(fail("world"))?;
    let grid = w.grid;
    let ext = grid.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(0x20e5);

    let mut zones = VectorLayer::new("zones");
    for i in 0..6 {
        let (sx, sy) = (rng.random_range(20.0..120.0), rng.random_range(20.0..120.0));
        let x0 = rng.random_range(ext.min_x..ext.max_x - sx);
        let y0 = rng.random_range(ext.min_y..ext.max_y - sy);
        let g = BBox::new(x0, y0, x0 + sx, y0 + sy).map_err(fail("zone"))?.to_polygon();
        zones
            .insert(feature(format!("z{i}"), g, None, None))
            .map_err(fail("zone insert"))?;
    }
    let mut train = VectorLayer::new("train");
    let truth = &w.scene.slices[0].1;
    for i in 0..24 {
        let c = grid.cell_at_index(rng.random_range(0..grid.len()));
        if train.iter().any(|f| f.cell == Some(c)) {
            continue;
        }
        let label = w.spec.classes[truth[grid.index(c)] as usize].clone();
        train
            .insert(feature(format!("t{i}"), grid.cell_polygon(c), Some(c), Some(label)))
            .map_err(fail("train insert"))?;
    }
    w.workspace.add_vector(zones).map_err(fail("zones"))?;
    w.workspace.add_vector(train).map_err(fail("train"))?;
    Ok(w)
}

fn feature(
    id: String,
    geometry: agency_core::geometry::Polygon,
    cell: Option<agency_core::raster::CellId>,
    label: Option<String>,
) -> Feature {
    Feature {
        id,
        geometry,
        attributes: BTreeMap::new(),
        label,
        label_origin: LabelOrigin::Manual,
        status: LabelStatus::Committed,
        cell,
    }
}

fn random_spec(rng: &mut ChaCha8Rng, w: &World) -> GraphSpec {
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut types: Vec<Ty> = Vec::new();
    let n = rng.random_range(3..=10);
    let slice_layer = |rng: &mut ChaCha8Rng| format!("s2/t{}", rng.random_range(0..SLICES));
    for i in 0..n {
        let of = |ty: Ty| -> Vec<usize> { (0..types.len()).filter(|&j| types[j] == ty).collect() };
        let rasters = of(Ty::Raster);
        let models = of(Ty::Model);
        let mut options = vec![0, 1, 6, 7, 8];
        if !rasters.is_empty() {
            options.extend([2, 3, 4, 5, 9, 10]);
        }
        if rasters.len() >= 2 {
            options.push(11);
        }
        if !models.is_empty() {
            options.push(12);
        }
        if !types.is_empty() {
            options.push(13);
        }
        let pick = *options.choose(rng).expect("non-empty");
        let any_raster = |rng: &mut ChaCha8Rng| rasters.choose(rng).map(|&j| format!("n{j}")).unwrap_or_default();
        let cmp = ["gt", "ge", "lt", "le"][rng.random_range(0..4)];
        let (op, params, inputs, ty) = match pick {
            0 => (OpKind::NdviIndex, json!({ "layer": slice_layer(rng) }), vec![], Ty::Raster),
            1 => (
                OpKind::Threshold,
                json!({ "layer": slice_layer(rng), "band": "B8", "value": rng.random_range(0.05..0.25), "cmp": cmp }),
                vec![],
                Ty::Raster,
            ),
            2 => (
                OpKind::Threshold,
                json!({ "value": rng.random_range(-0.5..0.8), "cmp": cmp }),
                vec![any_raster(rng)],
                Ty::Raster,
            ),
            3 => (OpKind::MaskApply, json!({ "mask": CROPLAND_LAYER }), vec![any_raster(rng)], Ty::Raster),
            4 => (OpKind::ZonalStats, json!({ "vector": "zones" }), vec![any_raster(rng)], Ty::Json),
            5 => (
                OpKind::AttachAttributes,
                json!({ "vector": "zones", "keys": ["shape.area", "computed.mean", "shape.compactness"] }),
                vec![any_raster(rng)],
                Ty::Vector,
            ),
            6 => (
                OpKind::TimeSeriesExtract,
                json!({ "layers": ["s2/t0", "s2/t1", "s2/t2"], "band": "B8", "vector": "zones" }),
                vec![],
                Ty::Json,
            ),
            7 => (OpKind::TrainLightweight, json!({ "vector": "train", "slice": rng.random_range(0..SLICES) }), vec![], Ty::Model),
            8 => {
                let cells: Vec<String> = (0..rng.random_range(1..=3))
                    .map(|_| w.grid.cell_at_index(rng.random_range(0..w.grid.len())).to_string())
                    .collect();
                (
                    OpKind::Perceive,
                    json!({
                        "task": { "kind": "classify", "classes": w.spec.classes },
                        "question": "what grows here?",
                        "cells": cells,
                    }),
                    vec![],
                    Ty::Json,
                )
            }
            9 => (
                OpKind::AttachAttributes,
                json!({ "vector": "zones", "keys": ["shape.perimeter"] }),
                vec![],
                Ty::Vector,
            ),
            10 => (OpKind::ZonalStats, json!({ "layer": slice_layer(rng), "band": "B4", "vector": "zones" }), vec![], Ty::Json),
            11 => {
                let a = any_raster(rng);
                let b = any_raster(rng);
                (OpKind::MaskApply, json!({}), vec![a, b], Ty::Raster)
            }
            12 => {
                let m = format!("n{}", models.choose(rng).expect("a model"));
                let params = if rng.random_bool(0.5) { json!({ "mask": CROPLAND_LAYER }) } else { json!({}) };
                (OpKind::PredictSurface, params, vec![m], Ty::Raster)
            }
            _ => {
                let j = rng.random_range(0..types.len());
                (OpKind::Export, json!({ "name": format!("e{i}") }), vec![format!("n{j}")], types[j])
            }
        };
        nodes.push(GraphNode {
            id: format!("n{i}"),
            op,
            params: serde_json::from_value(params).expect("object params"),
            inputs,
        });
        types.push(ty);
    }
    let mut outputs: Vec<String> = nodes.iter().filter(|_| rng.random_bool(0.4)).map(|n| n.id.clone()).collect();
    if outputs.is_empty() {
        outputs.push(nodes[n - 1].id.clone());
    }
    // shuffle declaration order; execution order must not depend on it
    let mut order: Vec<GraphNode> = nodes;
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    GraphSpec { nodes: order, outputs }
}

struct Rig {
    ws: Workspace,
    registry: PerceptorRegistry,
    memory: MemoryStore,
}

fn rig(w: &World) -> Result<Rig, String> {
    let mut registry = PerceptorRegistry::new();
    let p = MockOraclePerceptor::new(w.scene.clone(), 0.1, 11).map_err(fail("perceptor"))?;
    registry.register(TaskKind::Classify, Box::new(p));
    Ok(Rig { ws: w.workspace.clone(), registry, memory: MemoryStore::new(w.workspace.roi.clone()) })
}

fn snapshot(r: &Rig) -> Result<Value, String> {
    Ok(json!({
        "rasters": serde_json::to_value(&r.ws.rasters).map_err(fail("rasters"))?,
        "vectors": serde_json::to_value(&r.ws.vectors).map_err(fail("vectors"))?,
        "artifacts": serde_json::to_value(&r.ws.artifacts).map_err(fail("artifacts"))?,
        "memory": serde_json::to_value(r.memory.entries()).map_err(fail("memory"))?,
        "calls": r.registry.calls(),
    }))
}

pub fn run() -> Check {
    let w = world()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a9);
    let (mut resumed_calls, mut split) = (0, 0);
    for g in 0..GRAPHS {
        let spec = random_spec(&mut rng, &w);
        let graph = build_graph(&spec).map_err(|e| format!("graph {g}: {e}"))?;
        let now = TimeStamp(1000);

        let mut free = rig(&w)?;
        let mut env = ExecEnv { provider: Some(&w.provider), perception: Some((&mut free.registry, &mut free.memory)), now };
        let full = execute(&graph, &mut free.ws, &mut env, &Budget::unlimited(), None).map_err(|e| format!("graph {g}: {e}"))?;
        drop(env);
        ensure!(full.status == ExecStatus::Complete, "graph {g}: unbudgeted run is partial");

        let widest = graph.nodes().values().map(|n| node_cost(n, &w.workspace).0).max().unwrap_or(1);
        let budget = Budget {
            max_nodes: None,
            max_cost_units: Some(widest + rng.random_range(0..widest)),
            max_perceptor_calls: Some(1),
        };
        let mut tight = rig(&w)?;
        let mut env = ExecEnv { provider: Some(&w.provider), perception: Some((&mut tight.registry, &mut tight.memory)), now };
        let reports = run_to_completion(&graph, &mut tight.ws, &mut env, &budget).map_err(|e| format!("graph {g}: {e}"))?;
        drop(env);
        for r in &reports {
            ensure!(
                r.cost.cost_units <= budget.max_cost_units.unwrap_or(u64::MAX) && r.cost.perceptor_calls <= 1,
                "graph {g}: a call overran its budget"
            );
        }
        resumed_calls += reports.len();
        split += usize::from(reports.len() > 1);
        ensure!(snapshot(&free)? == snapshot(&tight)?, "graph {g}: budgeted artifacts differ from the unbudgeted run");
    }
    ensure!(split * 2 >= GRAPHS as usize, "only {split} of {GRAPHS} graphs were actually split by the budget");
    Ok(format!("{GRAPHS} graphs on 64x64, {split} split across {resumed_calls} calls, all bit-identical"))
}
