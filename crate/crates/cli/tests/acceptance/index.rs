//! R-tree and temporal retrieval against linear scans.

use std::collections::BTreeSet;

use agency_core::geomemory::{Author, CurateAction, MemoryQuery, MemoryStore, SpatialFilter};
use agency_core::geometry::BBox;
use agency_core::rtree::RTree;
use agency_core::time::{TimeStamp, TimeWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, fail, Check};

const ENTRIES: usize = 1000;
const QUERIES: usize = 100;
const SEEDS: u64 = 20;
const EXTENT: f64 = 1000.0;

#[derive(Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn random(rng: &mut ChaCha8Rng, max_side: f64) -> Self {
        let (w, h) = (rng.random_range(0.5..max_side), rng.random_range(0.5..max_side));
        let x0 = rng.random_range(0.0..EXTENT - w);
        let y0 = rng.random_range(0.0..EXTENT - h);
        Rect { x0, y0, x1: x0 + w, y1: y0 + h }
    }

    fn hits(&self, o: &Rect) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }

    fn bbox(&self) -> BBox {
        BBox::new(self.x0, self.y0, self.x1, self.y1).expect("ordered corners")
    }
}

struct Mirror {
    rect: Rect,
    t: i64,
    live: bool,
    notes: String,
}

fn window(rng: &mut ChaCha8Rng) -> (i64, i64) {
    let a = rng.random_range(0..10_000);
    let b = rng.random_range(0..10_000);
    (a.min(b), a.max(b))
}

fn one_seed(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roi = BBox::new(0.0, 0.0, EXTENT, EXTENT).map_err(fail("roi"))?.to_polygon();
    let mut store = MemoryStore::new(roi);
    let mut mirror: Vec<Mirror> = Vec::new();
    for i in 0..ENTRIES {
        let rect = Rect::random(&mut rng, 60.0);
        let t = rng.random_range(0..10_000);
        let notes = if i % 3 == 0 { "flooded field" } else { "dry field" };
        let author = if i % 2 == 0 { Author::Agent } else { Author::User };
        let id = store
            .write(rect.bbox().to_polygon(), TimeStamp(t), "classify", None, notes, author)
            .map_err(fail("write"))?;
        ensure!(id as usize == mirror.len(), "ids are not dense");
        mirror.push(Mirror { rect, t, live: true, notes: notes.into() });
    }
    // deletions and moves exercise removal from both indexes
    for _ in 0..ENTRIES / 5 {
        let id = rng.random_range(0..ENTRIES);
        if !mirror[id].live {
            continue;
        }
        if rng.random_bool(0.5) {
            store.curate(id as u64, CurateAction::Delete).map_err(fail("delete"))?;
            mirror[id].live = false;
        } else {
            let rect = Rect::random(&mut rng, 60.0);
            let action = CurateAction::Correct { notes: None, geometry: Some(rect.bbox().to_polygon()) };
            store.curate(id as u64, action).map_err(fail("correct"))?;
            mirror[id].rect = rect;
        }
    }

    let sorted = |v: Vec<u64>| v.into_iter().collect::<BTreeSet<u64>>();
    for q in 0..QUERIES {
        let area = Rect::random(&mut rng, 300.0);
        let (t0, t1) = window(&mut rng);
        let w = TimeWindow::new(TimeStamp(t0), TimeStamp(t1)).map_err(fail("window"))?;

        let want_space: BTreeSet<u64> =
            (0..ENTRIES).filter(|&i| mirror[i].live && mirror[i].rect.hits(&area)).map(|i| i as u64).collect();
        let got_space = sorted(store.spatial_candidates(&area.bbox()));
        ensure!(got_space == want_space, "seed {seed} query {q}: spatial {} vs {}", got_space.len(), want_space.len());

        let want_time: BTreeSet<u64> =
            (0..ENTRIES).filter(|&i| mirror[i].live && (t0..=t1).contains(&mirror[i].t)).map(|i| i as u64).collect();
        let got_time = sorted(store.temporal_candidates(&w));
        ensure!(got_time == want_time, "seed {seed} query {q}: temporal {} vs {}", got_time.len(), want_time.len());

        let keyword = (q % 4 == 0).then(|| "FLOOD".to_string());
        let query = MemoryQuery {
            spatial: Some(SpatialFilter::BBox(area.bbox())),
            temporal: Some(w),
            keyword: keyword.clone(),
            limit: None,
        };
        let got: BTreeSet<u64> = store.retrieve(&query).map_err(fail("retrieve"))?.iter().map(|e| e.id).collect();
        let want: BTreeSet<u64> = want_space
            .intersection(&want_time)
            .copied()
            .filter(|&i| keyword.is_none() || mirror[i as usize].notes.contains("flood"))
            .collect();
        ensure!(got == want, "seed {seed} query {q}: retrieve {} vs {}", got.len(), want.len());
    }
    Ok(QUERIES * 3)
}

/// The tree alone, with interleaved inserts and removals.
fn bare_tree(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ee);
    let mut tree = RTree::new();
    let mut live: Vec<Option<Rect>> = Vec::new();
    for i in 0..ENTRIES {
        let r = Rect::random(&mut rng, 40.0);
        tree.insert(r.bbox(), i);
        live.push(Some(r));
        if i % 4 == 3 {
            let victim = rng.random_range(0..=i);
            if let Some(r) = live[victim].take() {
                ensure!(tree.remove(&r.bbox(), &victim), "seed {seed}: remove of {victim} missed");
            }
        }
    }
    tree.check_invariants().map_err(fail("tree invariants"))?;
    for q in 0..QUERIES {
        let area = Rect::random(&mut rng, 300.0);
        let got: BTreeSet<usize> = tree.search(&area.bbox()).into_iter().copied().collect();
        let want: BTreeSet<usize> =
            live.iter().enumerate().filter(|(_, r)| r.is_some_and(|r| r.hits(&area))).map(|(i, _)| i).collect();
        ensure!(got == want, "seed {seed} tree query {q}: {} vs {}", got.len(), want.len());
    }
    Ok(())
}

pub fn run() -> Check {
    let mut checks = 0;
    for seed in 0..SEEDS {
        checks += one_seed(seed)?;
        bare_tree(seed)?;
    }
    Ok(format!("{SEEDS} seeds x {ENTRIES} entries, {checks} store queries plus bare-tree queries all equal"))
}
