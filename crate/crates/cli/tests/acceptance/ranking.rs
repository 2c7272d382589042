//! knn, diversity sampling, uncertainty sampling and propagation against
//! brute-force rankings. Vectors use small integer coordinates so exact ties
//! are common and the tie-break rules are exercised.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use agency_core::embeddings::{EmbeddingIndex, EmbeddingVector};
use agency_core::geometry::GeoPoint;
use agency_core::navigation::sample_uncertainty;
use agency_core::propagation::{propagate, SeedSet};
use agency_core::raster::{CellId, Grid, GridRaster};
use agency_core::vector::{Feature, LabelOrigin, LabelStatus, VectorLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, fail, Check};

const INSTANCES: u64 = 8;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best first by score, then ascending id.
fn by_score_then_id(a: &(f64, String), b: &(f64, String)) -> Ordering {
    b.0.partial_cmp(&a.0).expect("finite").then_with(|| a.1.cmp(&b.1))
}

fn random_items(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> BTreeMap<String, Vec<f64>> {
    let mut items = BTreeMap::new();
    while items.len() < n {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3..=3) as f64).collect();
        if v.iter().all(|x| *x == 0.0) {
            continue;
        }
        // ids are not inserted in order
        items.insert(format!("i{:05}", rng.random_range(0..100_000)), v);
    }
    items
}

fn index_of(items: &BTreeMap<String, Vec<f64>>, dim: usize) -> Result<EmbeddingIndex, String> {
    let mut shuffled: Vec<(String, EmbeddingVector)> =
        items.iter().map(|(k, v)| (k.clone(), EmbeddingVector(v.clone()))).collect();
    shuffled.reverse();
    EmbeddingIndex::from_items(dim, shuffled).map_err(fail("index"))
}

fn knn_check(rng: &mut ChaCha8Rng, inst: u64) -> Result<(), String> {
    let n = rng.random_range(200..=500);
    let dim = rng.random_range(2..=5);
    let items = random_items(rng, n, dim);
    let index = index_of(&items, dim)?;
    for q in 0..5 {
        let query: Vec<f64> = (0..dim).map(|_| rng.random_range(-3..=3) as f64 + 0.5).collect();
        let mut want: Vec<(f64, String)> = items.iter().map(|(id, v)| (cosine(&query, v), id.clone())).collect();
        want.sort_by(by_score_then_id);
        for k in [1, 7, 50, n] {
            let got = index.knn(&EmbeddingVector(query.clone()), k).map_err(fail("knn"))?;
            let got: Vec<(u64, &str)> = got.iter().map(|s| (s.score.to_bits(), s.id.as_str())).collect();
            let exp: Vec<(u64, &str)> = want.iter().take(k).map(|(s, id)| (s.to_bits(), id.as_str())).collect();
            ensure!(got == exp, "instance {inst} query {q} k={k}: knn ranking differs");
        }
    }
    Ok(())
}

/// Farthest-from-mean first, then the largest minimum squared distance to
/// the picks so far; ties go to the smallest id.
fn diversity_oracle(items: &BTreeMap<String, Vec<f64>>, k: usize) -> Vec<String> {
    let dim = items.values().next().map_or(0, Vec::len);
    let n = items.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| items.values().map(|v| v[d]).sum::<f64>() / n).collect();
    let mut picks: Vec<String> = Vec::new();
    while picks.len() < k {
        let mut best: Option<(f64, &String)> = None;
        for (id, v) in items {
            if picks.contains(id) {
                continue;
            }
            let d = if picks.is_empty() {
                sq_dist(v, &mean)
            } else {
                picks.iter().map(|p| sq_dist(v, &items[p])).fold(f64::INFINITY, f64::min)
            };
            // strict: an equal distance keeps the earlier (smaller) id
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, id));
            }
        }
        picks.push(best.expect("k <= n").1.clone());
    }
    picks
}

fn diversity_check(rng: &mut ChaCha8Rng, inst: u64) -> Result<(), String> {
    let n = rng.random_range(200..=500);
    let dim = rng.random_range(2..=4);
    let items = random_items(rng, n, dim);
    let index = index_of(&items, dim)?;
    for k in [1, 2, 10, 40] {
        let got = index.diversity_sample(k).map_err(fail("diversity"))?;
        ensure!(got == diversity_oracle(&items, k), "instance {inst} k={k}: diversity picks differ");
    }
    Ok(())
}

fn uncertainty_check(rng: &mut ChaCha8Rng, inst: u64) -> Result<(), String> {
    let (w, h) = (rng.random_range(10..=25), 20);
    let grid = Grid { origin: GeoPoint::new(0.0, 0.0), cell_size: 1.0, width: w, height: h };
    let nodata = -1.0;
    let mut conf = GridRaster::filled(grid, &["confidence", "other"], 0.0, nodata);
    for i in 0..grid.len() {
        conf.bands[0].values[i] = if rng.random_bool(0.1) { nodata } else { rng.random_range(0..=8) as f64 / 8.0 };
        conf.bands[1].values[i] = rng.random::<f64>();
    }
    let mut want: Vec<(f64, CellId)> = grid
        .cells()
        .filter(|c| conf.bands[0].values[grid.index(*c)] != nodata)
        .map(|c| (conf.bands[0].values[grid.index(c)], c))
        .collect();
    want.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    for budget in [1, 5, 64, grid.len()] {
        let got: Vec<CellId> = sample_uncertainty(&conf, budget)
            .map_err(fail("uncertainty"))?
            .into_iter()
            .flat_map(|p| p.cells)
            .collect();
        let exp: Vec<CellId> = want.iter().take(budget).map(|(_, c)| *c).collect();
        ensure!(got == exp, "instance {inst} budget {budget}: uncertainty order differs");
    }
    Ok(())
}

fn propagate_check(rng: &mut ChaCha8Rng, inst: u64) -> Result<(), String> {
    let side = rng.random_range(15..=22);
    let grid = Grid { origin: GeoPoint::new(0.0, 0.0), cell_size: 1.0, width: side, height: side };
    let dim = 3;
    let vecs: BTreeMap<String, Vec<f64>> = grid
        .cells()
        .map(|c| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect();
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
            (c.to_string(), v)
        })
        .collect();
    let index = index_of(&vecs, dim)?;

    let statuses = [LabelStatus::Committed, LabelStatus::Accepted, LabelStatus::Suggested, LabelStatus::Rejected];
    let mut layer = VectorLayer::new("labels");
    let mut by_status: BTreeMap<usize, Vec<(String, CellId)>> = BTreeMap::new();
    let cells: Vec<CellId> = grid.cells().collect();
    for (i, c) in cells.iter().enumerate().filter(|(i, _)| i % 9 == 4) {
        let s = i % statuses.len();
        let id = format!("f{i:04}");
        layer
            .insert(Feature {
                id: id.clone(),
                geometry: grid.cell_polygon(*c),
                attributes: BTreeMap::new(),
                label: Some("x".into()),
                label_origin: if s < 2 { LabelOrigin::Manual } else { LabelOrigin::Propagation },
                status: statuses[s],
                cell: Some(*c),
            })
            .map_err(fail("insert"))?;
        by_status.entry(s).or_default().push((id, *c));
    }
    let reviewed: Vec<(String, CellId)> = by_status[&0].iter().chain(&by_status[&1]).cloned().collect();
    let taken: BTreeSet<String> = layer.iter().filter_map(|f| f.cell.map(|c| c.to_string())).collect();
    let pool: Vec<String> = cells.iter().map(|c| c.to_string()).filter(|id| rng.random_bool(0.9) || taken.contains(id)).collect();

    for trial in 0..4 {
        let pos: Vec<&(String, CellId)> = (0..rng.random_range(1..=4)).map(|_| &reviewed[rng.random_range(0..reviewed.len())]).collect();
        let neg: Vec<&(String, CellId)> = (0..rng.random_range(0..=3)).map(|_| &reviewed[rng.random_range(0..reviewed.len())]).collect();
        let mut want: Vec<(f64, String)> = pool
            .iter()
            .filter(|id| !taken.contains(*id))
            .map(|id| {
                let v = &vecs[id];
                let best = |seeds: &[&(String, CellId)]| {
                    seeds.iter().map(|(_, c)| cosine(v, &vecs[&c.to_string()])).fold(f64::NEG_INFINITY, f64::max)
                };
                let s = if neg.is_empty() { best(&pos) } else { best(&pos) - best(&neg) };
                (s, id.clone())
            })
            .collect();
        want.sort_by(by_score_then_id);
        let seeds = SeedSet {
            label: "x".into(),
            positives: pos.iter().map(|(id, _)| id.clone()).collect(),
            negatives: neg.iter().map(|(id, _)| id.clone()).collect(),
        };
        for k in [1, 10, want.len()] {
            let got = propagate(&seeds, &layer, &index, &pool, k).map_err(fail("propagate"))?;
            let got: Vec<(u64, &str, usize)> = got.iter().map(|c| (c.score.to_bits(), c.id.as_str(), c.rank)).collect();
            let exp: Vec<(u64, &str, usize)> =
                want.iter().take(k).enumerate().map(|(r, (s, id))| (s.to_bits(), id.as_str(), r + 1)).collect();
            let first = got.iter().zip(&exp).position(|(a, b)| a != b);
            ensure!(
                got == exp,
                "instance {inst} trial {trial} k={k}: propagation ranking differs at {first:?} ({} vs {})",
                got.len(),
                exp.len()
            );
        }
        // suggested or rejected features are not valid seeds
        let bad = SeedSet { label: "x".into(), positives: vec![by_status[&2][0].0.clone()], negatives: vec![] };
        ensure!(propagate(&bad, &layer, &index, &pool, 5).is_err(), "instance {inst}: unreviewed seed accepted");
    }
    Ok(())
}

pub fn run() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a5);
    for inst in 0..INSTANCES {
        knn_check(&mut rng, inst)?;
        diversity_check(&mut rng, inst)?;
        uncertainty_check(&mut rng, inst)?;
        propagate_check(&mut rng, inst)?;
    }
    Ok(format!("{INSTANCES} instances per function, 200-500 items, all rankings identical"))
}
