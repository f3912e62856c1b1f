//! Hierarchical navigable small-world graph over the vectors of a
//! [`VectorIndex`](super::VectorIndex).
//!
//! Construction is single-threaded and deterministic: nodes are inserted in
//! index order and their layers drawn from a seeded generator. Distances are
//! `1 - dot`, which is cosine distance for unit vectors.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::dot;

/// Build- and query-time graph parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Max neighbours per node on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 200, ef_search: 128, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    dist: f32,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.node.cmp(&other.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmallWorldGraph {
    pub(crate) params: GraphParams,
    pub(crate) entry: Option<u32>,
    pub(crate) max_level: usize,
    /// `layers[node][level]` is the neighbour list of `node` at `level`.
    pub(crate) layers: Vec<Vec<Vec<u32>>>,
}

struct Vectors<'a> {
    data: &'a [f32],
    dim: usize,
}

impl Vectors<'_> {
    fn get(&self, i: u32) -> &[f32] {
        let i = i as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn dist(&self, q: &[f32], i: u32) -> f32 {
        (1.0 - dot(q, self.get(i))) as f32
    }
}

impl SmallWorldGraph {
    pub fn params(&self) -> &GraphParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Builds a graph over `count` vectors stored row-major in `data`.
    pub(crate) fn build(data: &[f32], dim: usize, params: GraphParams) -> Self {
        let params = GraphParams { m: params.m.max(2), ..params };
        let count = if dim == 0 { 0 } else { data.len() / dim };
        let vecs = Vectors { data, dim };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        let mut g = Self { params, entry: None, max_level: 0, layers: Vec::with_capacity(count) };
        for i in 0..count {
            let r: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let level = ((-r.ln() * ml).floor() as usize).min(16);
            g.insert(&vecs, i as u32, level);
        }
        g
    }

    fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, vecs: &Vectors<'_>, node: u32, level: usize) {
        self.layers.push(vec![Vec::new(); level + 1]);
        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return;
        };
        let q = vecs.get(node).to_vec();
        let top = self.max_level;
        for l in (level + 1..=top).rev() {
            ep = self.greedy_closest(vecs, &q, ep, l);
        }
        let mut entries = vec![ep];
        for l in (0..=level.min(top)).rev() {
            let found = self.search_layer(vecs, &q, &entries, self.params.ef_construction, l);
            let chosen = self.select_neighbors(vecs, &found, self.params.m);
            self.layers[node as usize][l] = chosen.iter().map(|s| s.node).collect();
            for s in &chosen {
                self.link(vecs, s.node, node, l);
            }
            entries = found.iter().map(|s| s.node).collect();
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(node);
        }
    }

    fn link(&mut self, vecs: &Vectors<'_>, from: u32, to: u32, level: usize) {
        let cap = self.max_degree(level);
        let list = &mut self.layers[from as usize][level];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = vecs.get(from);
        let mut cands: Vec<Scored> = list
            .iter()
            .map(|&n| Scored { dist: vecs.dist(base, n), node: n })
            .collect();
        cands.sort();
        let kept = self.select_neighbors(vecs, &cands, cap);
        self.layers[from as usize][level] = kept.iter().map(|s| s.node).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the
    /// base than to every neighbour already kept, then top up with the
    /// nearest pruned candidates. `sorted` must be ascending by distance.
    fn select_neighbors(&self, vecs: &Vectors<'_>, sorted: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = vecs.get(c.node);
            if kept.iter().all(|k| vecs.dist(cv, k.node) > c.dist) {
                kept.push(*c);
            } else {
                pruned.push(*c);
            }
        }
        for p in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(p);
        }
        kept
    }

    fn greedy_closest(&self, vecs: &Vectors<'_>, q: &[f32], mut ep: u32, level: usize) -> u32 {
        let mut best = vecs.dist(q, ep);
        loop {
            let mut changed = false;
            for &n in &self.layers[ep as usize][level] {
                let d = vecs.dist(q, n);
                if d < best || (d == best && n < ep) {
                    best = d;
                    ep = n;
                    changed = true;
                }
            }
            if !changed {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes ascending by
    /// distance.
    fn search_layer(&self, vecs: &Vectors<'_>, q: &[f32], entries: &[u32], ef: usize, level: usize) -> Vec<Scored> {
        let ef = ef.max(1);
        let mut visited: HashSet<u32> = HashSet::new();
        let mut frontier: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut best: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e) {
                let s = Scored { dist: vecs.dist(q, e), node: e };
                frontier.push(Reverse(s));
                best.push(s);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(cur)) = frontier.pop() {
            if let Some(worst) = best.peek() {
                if best.len() >= ef && cur.dist > worst.dist {
                    break;
                }
            }
            for &n in &self.layers[cur.node as usize][level] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored { dist: vecs.dist(q, n), node: n };
                let admit = best.len() < ef || best.peek().is_some_and(|w| s < *w);
                if admit {
                    frontier.push(Reverse(s));
                    best.push(s);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out = best.into_vec();
        out.sort();
        out
    }

    /// Approximate nearest neighbours of `q`: node ids ascending by
    /// distance, at most `max(k, ef)` of them.
    pub(crate) fn search(&self, data: &[f32], dim: usize, q: &[f32], k: usize, ef: usize) -> Vec<u32> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        let vecs = Vectors { data, dim };
        for l in (1..=self.max_level).rev() {
            ep = self.greedy_closest(&vecs, q, ep, l);
        }
        self.search_layer(&vecs, q, &[ep], ef.max(k), 0)
            .into_iter()
            .map(|s| s.node)
            .collect()
    }
}
