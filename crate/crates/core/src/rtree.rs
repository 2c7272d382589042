//! In-memory R-tree over bounding boxes with Guttman's quadratic split.
//!
//! Deletion condenses underfull nodes by re-inserting their leaf entries,
//! which keeps every leaf at the same depth.

use crate::geometry::BBox;

pub const DEFAULT_MAX_FANOUT: usize = 16;
pub const DEFAULT_MIN_FILL: usize = 6;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf(Vec<(BBox, T)>),
    Inner(Vec<(BBox, Node<T>)>),
}

impl<T> Node<T> {
    fn len(&self) -> usize {
        match self {
            Node::Leaf(e) => e.len(),
            Node::Inner(c) => c.len(),
        }
    }

    fn bbox(&self) -> Option<BBox> {
        match self {
            Node::Leaf(e) => e.iter().map(|(b, _)| *b).reduce(|a, b| a.union(&b)),
            Node::Inner(c) => c.iter().map(|(b, _)| *b).reduce(|a, b| a.union(&b)),
        }
    }

    fn drain_items(self, out: &mut Vec<(BBox, T)>) {
        match self {
            Node::Leaf(e) => out.extend(e),
            Node::Inner(c) => c.into_iter().for_each(|(_, n)| n.drain_items(out)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RTree<T> {
    root: Node<T>,
    len: usize,
    max_fanout: usize,
    min_fill: usize,
}

impl<T: Clone + PartialEq> Default for RTree<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone + PartialEq> RTree<T> {
    pub fn new() -> Self {
        Self::with_params(DEFAULT_MAX_FANOUT, DEFAULT_MIN_FILL)
    }

    pub fn with_params(max_fanout: usize, min_fill: usize) -> Self {
        assert!(max_fanout >= 2 && min_fill >= 1 && min_fill <= max_fanout / 2);
        Self {
            root: Node::Leaf(Vec::new()),
            len: 0,
            max_fanout,
            min_fill,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, bbox: BBox, item: T) {
        self.len += 1;
        let (max, min) = (self.max_fanout, self.min_fill);
        if let Some(sibling) = insert_rec(&mut self.root, bbox, item, max, min) {
            let old = std::mem::replace(&mut self.root, Node::Inner(Vec::new()));
            let children = vec![
                (old.bbox().expect("split half non-empty"), old),
                (sibling.bbox().expect("split half non-empty"), sibling),
            ];
            self.root = Node::Inner(children);
        }
    }

    /// Removes one entry equal to `(bbox, item)`. Returns whether it was found.
    pub fn remove(&mut self, bbox: &BBox, item: &T) -> bool {
        let mut orphans = Vec::new();
        if !remove_rec(&mut self.root, bbox, item, self.min_fill, &mut orphans) {
            return false;
        }
        self.len -= 1;
        loop {
            match &mut self.root {
                Node::Inner(c) if c.len() == 1 => {
                    let (_, only) = c.pop().expect("one child");
                    self.root = only;
                }
                Node::Inner(c) if c.is_empty() => self.root = Node::Leaf(Vec::new()),
                _ => break,
            }
        }
        let (max, min) = (self.max_fanout, self.min_fill);
        for (b, it) in orphans {
            if let Some(sibling) = insert_rec(&mut self.root, b, it, max, min) {
                let old = std::mem::replace(&mut self.root, Node::Inner(Vec::new()));
                self.root = Node::Inner(vec![
                    (old.bbox().expect("non-empty"), old),
                    (sibling.bbox().expect("non-empty"), sibling),
                ]);
            }
        }
        true
    }

    /// Items whose boxes intersect `query` (edges inclusive).
    pub fn search(&self, query: &BBox) -> Vec<&T> {
        let mut out = Vec::new();
        search_rec(&self.root, query, &mut out);
        out
    }

    /// Checks balance and fill; returns the tree height.
    pub fn check_invariants(&self) -> Result<usize, String> {
        fn walk<T>(
            n: &Node<T>,
            is_root: bool,
            max: usize,
            min: usize,
            depth: usize,
            leaf_depth: &mut Option<usize>,
        ) -> Result<usize, String> {
            if n.len() > max || (!is_root && n.len() < min) {
                return Err(format!("node fill {} outside [{min}, {max}]", n.len()));
            }
            match n {
                Node::Leaf(e) => {
                    match leaf_depth {
                        Some(d) if *d != depth => return Err("unbalanced leaves".into()),
                        _ => *leaf_depth = Some(depth),
                    }
                    Ok(e.len())
                }
                Node::Inner(c) => {
                    let mut total = 0;
                    for (b, child) in c {
                        if child.bbox() != Some(*b) {
                            return Err("stale child bbox".into());
                        }
                        total += walk(child, false, max, min, depth + 1, leaf_depth)?;
                    }
                    Ok(total)
                }
            }
        }
        let mut leaf_depth = None;
        let count = walk(&self.root, true, self.max_fanout, self.min_fill, 0, &mut leaf_depth)?;
        if count != self.len {
            return Err(format!("counted {count} entries, expected {}", self.len));
        }
        Ok(leaf_depth.unwrap_or(0) + 1)
    }
}

fn search_rec<'a, T>(n: &'a Node<T>, q: &BBox, out: &mut Vec<&'a T>) {
    match n {
        Node::Leaf(e) => out.extend(e.iter().filter(|(b, _)| b.intersects(q)).map(|(_, t)| t)),
        Node::Inner(c) => {
            for (b, child) in c {
                if b.intersects(q) {
                    search_rec(child, q, out);
                }
            }
        }
    }
}

fn insert_rec<T>(node: &mut Node<T>, bbox: BBox, item: T, max: usize, min: usize) -> Option<Node<T>> {
    match node {
        Node::Leaf(entries) => {
            entries.push((bbox, item));
            if entries.len() > max {
                let (a, b) = quadratic_split(std::mem::take(entries), min);
                *entries = a;
                return Some(Node::Leaf(b));
            }
            None
        }
        Node::Inner(children) => {
            let idx = choose_subtree(children, &bbox);
            children[idx].0 = children[idx].0.union(&bbox);
            if let Some(sibling) = insert_rec(&mut children[idx].1, bbox, item, max, min) {
                children[idx].0 = children[idx].1.bbox().expect("non-empty after split");
                children.push((sibling.bbox().expect("non-empty after split"), sibling));
                if children.len() > max {
                    let (a, b) = quadratic_split(std::mem::take(children), min);
                    *children = a;
                    return Some(Node::Inner(b));
                }
            }
            None
        }
    }
}

/// Least enlargement, then least area, then lowest index.
fn choose_subtree<X>(children: &[(BBox, X)], bbox: &BBox) -> usize {
    let mut best = 0;
    let mut best_key = (f64::INFINITY, f64::INFINITY);
    for (i, (b, _)) in children.iter().enumerate() {
        let key = (b.enlargement(bbox), b.area());
        if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best = i;
            best_key = key;
        }
    }
    best
}

type Groups<X> = (Vec<(BBox, X)>, Vec<(BBox, X)>);

fn quadratic_split<X>(entries: Vec<(BBox, X)>, min: usize) -> Groups<X> {
    // pick the pair wasting the most area as seeds
    let n = entries.len();
    let (mut s1, mut s2, mut worst) = (0, 1, f64::NEG_INFINITY);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&entries[i].0, &entries[j].0);
            let waste = a.union(b).area() - a.area() - b.area();
            if waste > worst {
                worst = waste;
                s1 = i;
                s2 = j;
            }
        }
    }
    let mut pending: Vec<Option<(BBox, X)>> = entries.into_iter().map(Some).collect();
    let first = pending[s1].take().expect("seed");
    let second = pending[s2].take().expect("seed");
    let (mut bb1, mut bb2) = (first.0, second.0);
    let mut g1 = vec![first];
    let mut g2 = vec![second];
    let mut remaining = n - 2;
    while remaining > 0 {
        if g1.len() + remaining == min {
            for e in pending.iter_mut().filter_map(Option::take) {
                bb1 = bb1.union(&e.0);
                g1.push(e);
            }
            break;
        }
        if g2.len() + remaining == min {
            for e in pending.iter_mut().filter_map(Option::take) {
                bb2 = bb2.union(&e.0);
                g2.push(e);
            }
            break;
        }
        // pick next: strongest preference for one group
        let mut pick = usize::MAX;
        let mut best_diff = f64::NEG_INFINITY;
        for (i, e) in pending.iter().enumerate() {
            if let Some((b, _)) = e {
                let diff = (bb1.enlargement(b) - bb2.enlargement(b)).abs();
                if diff > best_diff {
                    best_diff = diff;
                    pick = i;
                }
            }
        }
        let e = pending[pick].take().expect("picked pending entry");
        let (d1, d2) = (bb1.enlargement(&e.0), bb2.enlargement(&e.0));
        let to_first = if d1 != d2 {
            d1 < d2
        } else if bb1.area() != bb2.area() {
            bb1.area() < bb2.area()
        } else {
            g1.len() <= g2.len()
        };
        if to_first {
            bb1 = bb1.union(&e.0);
            g1.push(e);
        } else {
            bb2 = bb2.union(&e.0);
            g2.push(e);
        }
        remaining -= 1;
    }
    (g1, g2)
}

fn remove_rec<T: PartialEq>(
    node: &mut Node<T>,
    bbox: &BBox,
    item: &T,
    min: usize,
    orphans: &mut Vec<(BBox, T)>,
) -> bool {
    match node {
        Node::Leaf(entries) => match entries.iter().position(|(b, t)| b == bbox && t == item) {
            Some(pos) => {
                entries.remove(pos);
                true
            }
            None => false,
        },
        Node::Inner(children) => {
            for i in 0..children.len() {
                if !children[i].0.contains(bbox) {
                    continue;
                }
                if remove_rec(&mut children[i].1, bbox, item, min, orphans) {
                    if children[i].1.len() < min {
                        let (_, removed) = children.remove(i);
                        removed.drain_items(orphans);
                    } else {
                        children[i].0 = children[i].1.bbox().expect("non-empty child");
                    }
                    return true;
                }
            }
            false
        }
    }
}
