//! Grid-neighbour graph, node2vec walks and skip-gram cell embeddings.

mod skipgram;
mod table;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::GridSpec;

pub use skipgram::{train_skipgram, train_skipgram_logged};
pub use table::EmbeddingTable;

/// Undirected graph over grid cells. Cells built from a grid keep their
/// row/column layout so that 3x3 neighbourhoods can be addressed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    adjacency: Vec<Vec<usize>>,
    layout: Option<(usize, usize)>,
}

impl CellGraph {
    /// 8-neighbourhood graph over every cell of `grid`.
    pub fn from_grid(grid: &GridSpec) -> Self {
        Self::lattice(grid.n_rows(), grid.n_cols())
    }

    /// 8-neighbourhood graph over an `n_rows x n_cols` lattice indexed
    /// `row * n_cols + col`.
    pub fn lattice(n_rows: usize, n_cols: usize) -> Self {
        let mut adjacency = Vec::with_capacity(n_rows * n_cols);
        for r in 0..n_rows {
            for c in 0..n_cols {
                let mut nb = Vec::with_capacity(8);
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if (0..n_rows as isize).contains(&rr) && (0..n_cols as isize).contains(&cc) {
                            nb.push(rr as usize * n_cols + cc as usize);
                        }
                    }
                }
                adjacency.push(nb);
            }
        }
        CellGraph {
            adjacency,
            layout: Some((n_rows, n_cols)),
        }
    }

    /// Arbitrary undirected graph; neighbour lists must be symmetric and
    /// free of self-loops.
    pub fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Result<Self> {
        let n = adjacency.len();
        for nb in &mut adjacency {
            nb.sort_unstable();
            nb.dedup();
        }
        for (i, nb) in adjacency.iter().enumerate() {
            for &j in nb {
                if j >= n || j == i || adjacency[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidArgument(format!("edge {i}-{j} is not a valid undirected edge")));
                }
            }
        }
        Ok(CellGraph { adjacency, layout: None })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn layout(&self) -> Option<(usize, usize)> {
        self.layout
    }

    /// The 3x3 block around `cell`, row-major over rows `r-1..=r+1` and
    /// columns `c-1..=c+1`; slot 4 is the cell itself. Slots outside the
    /// grid are `None`.
    pub fn neighborhood(&self, cell: usize) -> Result<[Option<usize>; 9]> {
        let (rows, cols) = self
            .layout
            .ok_or_else(|| Error::InvalidArgument("graph has no grid layout".into()))?;
        if cell >= rows * cols {
            return Err(Error::CellOutOfRange {
                index: cell,
                n_nodes: rows * cols,
            });
        }
        let (r, c) = ((cell / cols) as isize, (cell % cols) as isize);
        let mut out = [None; 9];
        for (k, slot) in out.iter_mut().enumerate() {
            let (rr, cc) = (r + k as isize / 3 - 1, c + k as isize % 3 - 1);
            if (0..rows as isize).contains(&rr) && (0..cols as isize).contains(&cc) {
                *slot = Some(rr as usize * cols + cc as usize);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Node2vecConfig {
    pub p: f64,
    pub q: f64,
    pub walk_len: usize,
    pub walks_per_node: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Node2vecConfig {
    fn default() -> Self {
        Node2vecConfig {
            p: 1.0,
            q: 1.0,
            walk_len: 50,
            walks_per_node: 10,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

impl Node2vecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.q > 0.0 && self.p.is_finite() && self.q.is_finite()) {
            return Err(Error::InvalidArgument(format!("p = {}, q = {} must be positive", self.p, self.q)));
        }
        if self.walk_len == 0 || self.walks_per_node == 0 || self.window == 0 || self.negatives == 0 {
            return Err(Error::InvalidArgument("node2vec counts must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// `walks_per_node` second-order biased walks of `walk_len` nodes from every
/// node. Walk `r` from node `v` is seeded from `(seed, r, v)` alone, so the
/// corpus does not depend on the number of worker threads.
pub fn random_walks(graph: &CellGraph, cfg: &Node2vecConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("graph has no nodes".into()));
    }
    let (inv_p, inv_q) = (1.0 / cfg.p, 1.0 / cfg.q);
    Ok((0..cfg.walks_per_node * n)
        .into_par_iter()
        .map(|k| {
            let (round, start) = (k / n, k % n);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((round as u64) << 32) | start as u64);
            walk_from(graph, start, cfg.walk_len, inv_p, inv_q, &mut rng)
        })
        .collect())
}

fn walk_from(graph: &CellGraph, start: usize, len: usize, inv_p: f64, inv_q: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut walk = Vec::with_capacity(len);
    walk.push(start);
    let mut weights = Vec::with_capacity(8);
    while walk.len() < len {
        let cur = *walk.last().unwrap();
        let nb = graph.neighbors(cur);
        if nb.is_empty() {
            walk.push(cur);
            continue;
        }
        let next = match walk.len().checked_sub(2).map(|i| walk[i]) {
            None => nb[rng.random_range(0..nb.len())],
            Some(prev) => {
                weights.clear();
                weights.extend(nb.iter().map(|&x| {
                    if x == prev {
                        inv_p
                    } else if graph.is_adjacent(prev, x) {
                        1.0
                    } else {
                        inv_q
                    }
                }));
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = nb[nb.len() - 1];
                for (&x, &w) in nb.iter().zip(&weights) {
                    if u < w {
                        pick = x;
                        break;
                    }
                    u -= w;
                }
                pick
            }
        };
        walk.push(next);
    }
    walk
}
