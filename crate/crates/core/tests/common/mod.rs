#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tjepa_core::cells::{random_walks, train_skipgram, CellGraph, EmbeddingTable, Node2vecConfig};
use tjepa_core::traj::{synth_generate, trajectory_to_cells, CellTrajectory, GridMode, GridSpec, Trajectory};

pub mod oracles;

pub struct World {
    pub grid: GridSpec,
    pub graph: CellGraph,
    pub table: EmbeddingTable,
    pub trajs: Vec<Trajectory>,
    pub cells: Vec<CellTrajectory>,
}

pub fn planar_grid(rows: usize, cols: usize) -> GridSpec {
    GridSpec::from_origin(0.0, 0.0, cols, rows, 1.0, GridMode::Planar).unwrap()
}

pub fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTable::new(n, d, (0..n * d).map(|_| rng.random_range(-0.5f32..0.5)).collect()).unwrap()
}

pub fn node2vec_table(graph: &CellGraph, d: usize, seed: u64) -> EmbeddingTable {
    let cfg = Node2vecConfig {
        walk_len: 20,
        walks_per_node: 4,
        window: 4,
        epochs: 1,
        seed,
        ..Default::default()
    };
    let walks = random_walks(graph, &cfg).unwrap();
    train_skipgram(&walks, &cfg, d).unwrap()
}

/// Synthetic walks on a planar grid with either random or node2vec cell
/// vectors.
pub fn world(rows: usize, cols: usize, d: usize, count: usize, lens: (usize, usize), seed: u64, pretrained: bool) -> World {
    let grid = planar_grid(rows, cols);
    let graph = CellGraph::from_grid(&grid);
    let table = if pretrained {
        node2vec_table(&graph, d, seed)
    } else {
        random_table(grid.n_cells(), d, seed)
    };
    let trajs = synth_generate(count, &grid, lens, seed).unwrap();
    let cells = trajs.iter().map(|t| trajectory_to_cells(t, &grid).unwrap()).collect();
    World {
        grid,
        graph,
        table,
        trajs,
        cells,
    }
}
