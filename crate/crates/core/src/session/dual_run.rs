//! Standalone dual-model loop on a generated world, with a truthful reviewer
//! who labels every queued cell. Used by `agency dual-loop` and for checking
//! that the loop separates easy worlds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dual::{dual_loop_step, LoopState, NearestCentroidModel};
use crate::error::{Error, Result};
use crate::raster::{CellId, GridRaster};
use crate::seed;
use crate::vector::{Feature, LabelOrigin, LabelStatus, VectorLayer};

use super::world::{generate_world, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualRunConfig {
    pub world: WorldSpec,
    pub seed: u64,
    /// Initial labeled cells, split as evenly as possible across classes.
    pub seeds: usize,
    pub rounds: u32,
    pub queue_len: usize,
    pub temperature: f64,
}

impl Default for DualRunConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec {
                classes: vec!["target".into(), "background".into()],
                cropland: Vec::new(),
                slices: 1,
                sigma: 0.1,
                ..WorldSpec::default()
            },
            seed: 7,
            seeds: 10,
            rounds: 1,
            queue_len: 10,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStat {
    pub iteration: u32,
    pub labeled: usize,
    pub training_digest: String,
    /// F1 of the first class under the surface argmax, over every cell.
    pub f1: f64,
    pub accuracy: f64,
    pub queue: Vec<CellId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualRunReport {
    pub rounds: Vec<RoundStat>,
    /// Surface of the last round, one band per class.
    pub surface: GridRaster,
}

fn f1_and_accuracy(pred: &[usize], truth: &[u16]) -> (f64, f64) {
    let (mut tp, mut fp, mut fnn, mut hit) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let t = t as usize;
        hit += usize::from(p == t);
        match (p == 0, t == 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64 };
    (f1, hit as f64 / truth.len() as f64)
}

pub fn run_dual(cfg: &DualRunConfig) -> Result<DualRunReport> {
    if cfg.rounds == 0 || cfg.seeds < cfg.world.classes.len() {
        return Err(Error::InvalidParams("need at least one round and one seed per class".into()));
    }
    let world = generate_world(&cfg.world, cfg.seed)?;
    let grid = world.grid;
    let truth = &world.scene.slices[0].1;
    let names = &cfg.world.classes;

    let mut by_class: BTreeMap<u16, Vec<CellId>> = BTreeMap::new();
    for c in grid.cells() {
        by_class.entry(truth[grid.index(c)]).or_default().push(c);
    }
    let mut rng = seed::rng(&[cfg.seed, 0xd0a1]);
    let k = names.len();
    let mut seeds = Vec::new();
    for (i, class) in (0..k as u16).enumerate() {
        let want = cfg.seeds / k + usize::from(i < cfg.seeds % k);
        let mut pool = by_class.get(&class).cloned().unwrap_or_default();
        pool.shuffle(&mut rng);
        seeds.extend(pool.into_iter().take(want));
    }

    let mut layer = VectorLayer::new("labels");
    let label = |layer: &mut VectorLayer, cell: CellId| -> Result<()> {
        layer.insert(Feature {
            id: format!("f{:06}", layer.features.len()),
            geometry: grid.cell_polygon(cell),
            attributes: BTreeMap::new(),
            label: Some(names[truth[grid.index(cell)] as usize].clone()),
            label_origin: LabelOrigin::Manual,
            status: LabelStatus::Committed,
            cell: Some(cell),
        })
    };
    for &c in &seeds {
        label(&mut layer, c)?;
    }

    let mut state = LoopState::default();
    let mut rounds = Vec::new();
    let mut surface = None;
    for _ in 0..cfg.rounds {
        let mut model = NearestCentroidModel::new(cfg.temperature);
        let step = dual_loop_step(&mut state, &layer, &world.provider, 0, &grid, None, cfg.queue_len, &mut model)?;
        // class order in the surface is the model's (sorted) order; map back to spec order
        let order: Vec<usize> = step
            .surface
            .raster
            .bands
            .iter()
            .map(|b| cfg.world.class_index(&b.name))
            .collect::<Result<_>>()?;
        let pred: Vec<usize> = grid
            .cells()
            .map(|c| step.surface.argmax(c).map(|j| order[j]).unwrap_or(usize::MAX))
            .collect();
        let (f1, accuracy) = f1_and_accuracy(&pred, truth);
        rounds.push(RoundStat {
            iteration: state.iteration,
            labeled: state.labeled.len(),
            training_digest: step.surface.training_digest.clone(),
            f1,
            accuracy,
            queue: state.review_queue.clone(),
        });
        for &c in &state.review_queue {
            label(&mut layer, c)?;
        }
        surface = Some(step.surface.raster);
    }
    Ok(DualRunReport { rounds, surface: surface.expect("at least one round") })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_grow_by_the_queue() {
        let cfg = DualRunConfig { rounds: 3, ..DualRunConfig::default() };
        let r = run_dual(&cfg).unwrap();
        assert_eq!(r.rounds.len(), 3);
        assert_eq!(r.rounds[0].labeled, 10);
        assert_eq!(r.rounds[1].labeled, 20);
        assert_eq!(r.rounds[2].iteration, 3);
        assert_eq!(run_dual(&cfg).unwrap().rounds, r.rounds);
    }

    #[test]
    fn rejects_too_few_seeds() {
        let cfg = DualRunConfig { seeds: 1, ..DualRunConfig::default() };
        assert!(matches!(run_dual(&cfg), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn f1_counts() {
        // tp=1 fp=1 fn=1 -> 2/4
        let (f1, acc) = f1_and_accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert_eq!(f1, 0.5);
        assert_eq!(acc, 0.5);
    }
}
