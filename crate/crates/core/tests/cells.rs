use tjepa_core::cells::{random_walks, train_skipgram, train_skipgram_logged, CellGraph, Node2vecConfig};

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Counts the successors of the step `prev -> cur` over all walks.
fn successor_counts(walks: &[Vec<usize>], prev: usize, cur: usize, n: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n];
    for w in walks {
        for t in w.windows(3) {
            if t[0] == prev && t[1] == cur {
                counts[t[2]] += 1.0;
            }
        }
    }
    counts
}

#[test]
fn path_graph_transition_frequencies() {
    // 0 - 1 - 2: after 0 -> 1 the walk returns with weight 1/p or moves on
    // with weight 1/q (node 2 is two hops from 0).
    let g = CellGraph::from_adjacency(vec![vec![1], vec![0, 2], vec![1]]).unwrap();
    let (p, q) = (0.5, 2.0);
    let cfg = Node2vecConfig {
        p,
        q,
        walk_len: 1000,
        walks_per_node: 100,
        seed: 3,
        ..Default::default()
    };
    let walks = random_walks(&g, &cfg).unwrap();
    let counts = successor_counts(&walks, 0, 1, 3);
    let total: f64 = counts.iter().sum();
    assert!(total > 1e4, "only {total} samples");
    let expected_return = (1.0 / p) / (1.0 / p + 1.0 / q);
    assert!((counts[0] / total - expected_return).abs() < 0.02);
    assert!((counts[2] / total - (1.0 - expected_return)).abs() < 0.02);
}

#[test]
fn three_way_transition_weights() {
    // From 0 -> 1, node 0 is a return (1/p), node 3 is adjacent to 0 (1),
    // node 2 is two hops from 0 (1/q).
    let g = CellGraph::from_adjacency(vec![vec![1, 3], vec![0, 2, 3], vec![1], vec![0, 1]]).unwrap();
    let (p, q) = (0.5, 4.0);
    let cfg = Node2vecConfig {
        p,
        q,
        walk_len: 2000,
        walks_per_node: 50,
        seed: 5,
        ..Default::default()
    };
    let walks = random_walks(&g, &cfg).unwrap();
    let counts = successor_counts(&walks, 0, 1, 4);
    let total: f64 = counts.iter().sum();
    assert!(total > 1e4, "only {total} samples");
    let w = [1.0 / p, 1.0, 1.0 / q];
    let sum: f64 = w.iter().sum();
    for (node, weight) in [(0, w[0]), (3, w[1]), (2, w[2])] {
        let got = counts[node] / total;
        assert!((got - weight / sum).abs() < 0.02, "node {node}: {got} vs {}", weight / sum);
    }
}

#[test]
fn zero_epochs_returns_initialisation() {
    let g = CellGraph::lattice(4, 4);
    let cfg = Node2vecConfig {
        epochs: 0,
        walk_len: 10,
        walks_per_node: 2,
        seed: 1,
        ..Default::default()
    };
    let walks = random_walks(&g, &cfg).unwrap();
    let a = train_skipgram(&walks, &cfg, 8).unwrap();
    let b = train_skipgram(&walks, &Node2vecConfig { epochs: 2, ..cfg.clone() }, 8).unwrap();
    let bound = 0.5 / 8.0;
    assert!(a.data().iter().all(|v| v.abs() <= bound));
    assert_ne!(a, b);
    assert!(train_skipgram(&walks, &cfg, 0).is_err());
    assert!(train_skipgram(&[], &cfg, 8).is_err());
}

#[test]
fn single_worker_training_is_bitwise_reproducible() {
    let g = CellGraph::lattice(6, 6);
    let cfg = Node2vecConfig {
        walk_len: 20,
        walks_per_node: 4,
        epochs: 2,
        seed: 11,
        ..Default::default()
    };
    let walks = random_walks(&g, &cfg).unwrap();
    assert_eq!(train_skipgram(&walks, &cfg, 16).unwrap(), train_skipgram(&walks, &cfg, 16).unwrap());
}

#[test]
fn adjacent_cells_embed_closer_than_distant_ones() {
    let (rows, cols) = (10, 10);
    let g = CellGraph::lattice(rows, cols);
    let cfg = Node2vecConfig {
        seed: 21,
        ..Default::default()
    };
    let walks = random_walks(&g, &cfg).unwrap();
    let (table, losses) = train_skipgram_logged(&walks, &cfg, 32).unwrap();
    assert!(table.data().iter().all(|v| v.is_finite()));
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "epoch losses {losses:?}");
    }

    let (mut near, mut far) = (Vec::new(), Vec::new());
    for a in 0..rows * cols {
        for b in a + 1..rows * cols {
            let cheb = (a / cols).abs_diff(b / cols).max((a % cols).abs_diff(b % cols));
            let c = cosine(table.row(a), table.row(b));
            if cheb == 1 {
                near.push(c);
            } else if cheb >= 5 {
                far.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let margin = mean(&near) - mean(&far);
    assert!(margin >= 0.1, "near {} far {} margin {margin}", mean(&near), mean(&far));
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn embedding_distance_tracks_spatial_distance() {
    let n = 16;
    let g = CellGraph::lattice(n, n);
    let cfg = Node2vecConfig {
        seed: 8,
        epochs: 3,
        ..Default::default()
    };
    let walks = random_walks(&g, &cfg).unwrap();
    let table = train_skipgram(&walks, &cfg, 32).unwrap();
    let (mut spatial, mut emb) = (Vec::new(), Vec::new());
    for a in (0..n * n).step_by(3) {
        for b in (a + 1..n * n).step_by(5) {
            let (dr, dc) = ((a / n).abs_diff(b / n) as f64, (a % n).abs_diff(b % n) as f64);
            spatial.push((dr * dr + dc * dc).sqrt());
            emb.push(1.0 - cosine(table.row(a), table.row(b)));
        }
    }
    let rho = pearson(&ranks(&spatial), &ranks(&emb));
    assert!(rho > 0.0, "spearman {rho}");
}
