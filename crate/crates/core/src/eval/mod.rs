//! Evaluation protocols: self-similarity search over odd/even halves,
//! robustness to down-sampling and distortion, and frozen-encoder
//! fine-tuning toward heuristic measures.

mod finetune;
mod report;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{CellGraph, EmbeddingTable};
use crate::error::{Error, Result};
use crate::jepa::{embed_cells, embedding_distance, DistanceKind, ModelState};
use crate::measures::{pairwise_matrix, Measure};
use crate::traj::{distort, downsample, odd_even_split, trajectory_to_cells_snapped, GridSpec, Trajectory};

pub use finetune::{finetune, measure_rankings, FinetuneConfig, FinetuneHead, FinetuneOutcome};
pub use report::{emit_report, read_report_json, EvalReport, ReportFormat};

/// Queries are odd halves, the database holds the matching even halves
/// followed by filler trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDatabase {
    pub queries: Vec<Trajectory>,
    pub database: Vec<Trajectory>,
    /// Database index of each query's counterpart.
    pub truth: Vec<usize>,
}

impl QueryDatabase {
    pub fn n_fillers(&self) -> usize {
        self.database.len() - self.queries.len()
    }

    pub fn truth_id(&self, query: usize) -> &str {
        &self.database[self.truth[query]].id
    }
}

/// Draws `n_queries` trajectories to split into query/truth halves and
/// `db_size - n_queries` distinct others as fillers. Fillers contribute
/// their even half so every database entry has the same sampling density.
pub fn build_query_db(test_set: &[Trajectory], n_queries: usize, db_size: usize, seed: u64) -> Result<QueryDatabase> {
    if n_queries == 0 || db_size < n_queries {
        return Err(Error::InvalidArgument(format!(
            "need 0 < n_queries <= db_size, got {n_queries} and {db_size}"
        )));
    }
    let usable: Vec<usize> = (0..test_set.len()).filter(|&i| test_set[i].len() >= 2).collect();
    if usable.len() < db_size {
        return Err(Error::InvalidArgument(format!(
            "{} usable trajectories for a database of {db_size}",
            usable.len()
        )));
    }
    let ids: BTreeSet<&str> = usable.iter().map(|&i| test_set[i].id.as_str()).collect();
    if ids.len() != usable.len() {
        return Err(Error::InvalidArgument("trajectory ids are not unique".into()));
    }
    let mut order = usable;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut queries = Vec::with_capacity(n_queries);
    let mut database = Vec::with_capacity(db_size);
    for &i in &order[..n_queries] {
        let (a, b) = odd_even_split(&test_set[i])?;
        queries.push(a);
        database.push(b);
    }
    for &i in &order[n_queries..db_size] {
        database.push(odd_even_split(&test_set[i])?.1);
    }
    Ok(QueryDatabase {
        queries,
        database,
        truth: (0..n_queries).collect(),
    })
}

/// Database indices kept at `fraction`: all ground truths plus a prefix of
/// one seeded filler permutation, so smaller fractions nest in larger ones.
pub fn subdatabase(qdb: &QueryDatabase, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("database fraction {fraction} outside (0, 1]")));
    }
    let truths: BTreeSet<usize> = qdb.truth.iter().copied().collect();
    let mut fillers: Vec<usize> = (0..qdb.database.len()).filter(|i| !truths.contains(i)).collect();
    fillers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = ((fraction * qdb.database.len() as f64).round() as usize).max(truths.len());
    let mut keep: Vec<usize> = truths.into_iter().collect();
    keep.extend_from_slice(&fillers[..size - keep.len()]);
    keep.sort_unstable();
    Ok(keep)
}

/// 1-based rank of each query's truth among `subset`, ordering by distance
/// and then by database id.
pub fn truth_ranks(
    query_embs: &[Vec<f32>],
    db_embs: &[Vec<f32>],
    qdb: &QueryDatabase,
    subset: &[usize],
    kind: DistanceKind,
) -> Result<Vec<usize>> {
    if query_embs.len() != qdb.queries.len() || db_embs.len() != qdb.database.len() {
        return Err(Error::InvalidArgument("embedding counts do not match the query database".into()));
    }
    (0..qdb.queries.len())
        .into_par_iter()
        .map(|q| {
            let t = qdb.truth[q];
            if subset.binary_search(&t).is_err() {
                return Err(Error::InvalidArgument(format!("ground truth of query {q} missing from database")));
            }
            let dt = embedding_distance(&query_embs[q], &db_embs[t], kind)?;
            let tid = &qdb.database[t].id;
            let mut rank = 1;
            for &j in subset {
                if j == t {
                    continue;
                }
                let dj = embedding_distance(&query_embs[q], &db_embs[j], kind)?;
                if dj < dt || (dj == dt && qdb.database[j].id < *tid) {
                    rank += 1;
                }
            }
            Ok(rank)
        })
        .collect()
}

pub fn mean_rank(
    query_embs: &[Vec<f32>],
    db_embs: &[Vec<f32>],
    qdb: &QueryDatabase,
    db_fraction: f64,
    kind: DistanceKind,
    seed: u64,
) -> Result<f64> {
    let subset = subdatabase(qdb, db_fraction, seed)?;
    let ranks = truth_ranks(query_embs, db_embs, qdb, &subset, kind)?;
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

/// Candidate indices sorted by ascending distance, ties by index, with
/// `exclude` left out.
pub fn ranking(distances: &[f64], exclude: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).filter(|&i| Some(i) != exclude).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    idx
}

fn overlap_ratio(pred: &[Vec<usize>], truth: &[Vec<usize>], k_pred: usize, k_truth: usize) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument("prediction and truth rankings must be nonempty and aligned".into()));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() < k_pred || t.len() < k_truth {
            return Err(Error::InvalidArgument(format!(
                "ranking of {} candidates is shorter than k = {}",
                p.len().min(t.len()),
                k_pred.max(k_truth)
            )));
        }
        let top: BTreeSet<usize> = t[..k_truth].iter().copied().collect();
        total += p[..k_pred].iter().filter(|i| top.contains(i)).count() as f64 / k_truth as f64;
    }
    Ok(total / pred.len() as f64)
}

/// Share of the true top-k found in the predicted top-k, averaged over
/// queries.
pub fn hr_at_k(pred: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    overlap_ratio(pred, truth, k, k)
}

/// Share of the true top-5 found in the predicted top-20.
pub fn r5_at_20(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    overlap_ratio(pred, truth, 20, 5)
}

/// Maps trajectories through a frozen model. Points outside the grid snap
/// to the border, so perturbed inputs stay embeddable.
#[derive(Clone, Copy)]
pub struct Embedder<'a> {
    pub grid: &'a GridSpec,
    pub table: &'a EmbeddingTable,
    pub graph: &'a CellGraph,
    pub state: &'a ModelState,
}

impl Embedder<'_> {
    pub fn embed(&self, t: &Trajectory) -> Result<Vec<f32>> {
        let cells = trajectory_to_cells_snapped(t, self.grid);
        embed_cells(&cells.cells, self.table, self.graph, self.state)
    }

    pub fn embed_all(&self, data: &[Trajectory]) -> Result<Vec<Vec<f32>>> {
        data.par_iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    Downsample,
    Distort,
}

impl Perturbation {
    pub fn name(self) -> &'static str {
        match self {
            Perturbation::Downsample => "downsample",
            Perturbation::Distort => "distort",
        }
    }

    fn apply(self, t: &Trajectory, level: f64, magnitude: f64, grid: &GridSpec, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        match self {
            Perturbation::Downsample => downsample(t, level, rng),
            Perturbation::Distort => distort(t, level, magnitude, grid.metric(), rng),
        }
    }
}

/// Default perturbation levels.
pub const ROBUSTNESS_LEVELS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Perturbs every query and database trajectory at one level. Each
/// trajectory draws from its own stream so results do not depend on
/// evaluation order.
pub fn perturb_qdb(
    qdb: &QueryDatabase,
    kind: Perturbation,
    level: f64,
    magnitude: f64,
    grid: &GridSpec,
    seed: u64,
) -> Result<QueryDatabase> {
    let stream = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        rng
    };
    let nq = qdb.queries.len();
    let queries = (0..nq)
        .map(|i| kind.apply(&qdb.queries[i], level, magnitude, grid, &mut stream(i)))
        .collect::<Result<Vec<_>>>()?;
    let database = (0..qdb.database.len())
        .map(|i| kind.apply(&qdb.database[i], level, magnitude, grid, &mut stream(nq + i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryDatabase {
        queries,
        database,
        truth: qdb.truth.clone(),
    })
}

/// Mean rank at full database size for each perturbation level, one
/// report per level.
pub fn robustness_eval(
    embedder: &Embedder<'_>,
    qdb: &QueryDatabase,
    kind: Perturbation,
    levels: &[f64],
    magnitude: f64,
    distance: DistanceKind,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    levels
        .iter()
        .map(|&level| {
            let perturbed = perturb_qdb(qdb, kind, level, magnitude, embedder.grid, seed)?;
            let q = embedder.embed_all(&perturbed.queries)?;
            let d = embedder.embed_all(&perturbed.database)?;
            let mr = mean_rank(&q, &d, &perturbed, 1.0, distance, seed)?;
            let mut r = EvalReport::new(kind.name(), seed);
            r.setting("level", level).setting("db_size", qdb.database.len() as f64);
            if kind == Perturbation::Distort {
                r.setting("magnitude", magnitude);
            }
            r.metric("mean_rank", mr);
            Ok(r)
        })
        .collect()
}

/// Mean rank at each database fraction, one report per fraction.
pub fn search_eval(
    embedder: &Embedder<'_>,
    qdb: &QueryDatabase,
    fractions: &[f64],
    distance: DistanceKind,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let q = embedder.embed_all(&qdb.queries)?;
    let d = embedder.embed_all(&qdb.database)?;
    fractions
        .iter()
        .map(|&f| {
            let mut r = EvalReport::new("search", seed);
            r.setting("db_fraction", f).setting("db_size", qdb.database.len() as f64);
            r.metric("mean_rank", mean_rank(&q, &d, qdb, f, distance, seed)?);
            Ok(r)
        })
        .collect()
}

/// Per-vector ranking of all other vectors by embedding distance.
pub fn vector_rankings(vectors: &[Vec<f32>], kind: DistanceKind) -> Result<Vec<Vec<usize>>> {
    (0..vectors.len())
        .into_par_iter()
        .map(|i| {
            let d = vectors
                .iter()
                .map(|v| embedding_distance(&vectors[i], v, kind))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ranking(&d, Some(i)))
        })
        .collect()
}

/// Untrained and trained head scores from one fine-tune run.
#[derive(Debug, Clone)]
pub struct FinetuneEval {
    pub before: EvalReport,
    pub after: EvalReport,
    pub outcome: FinetuneOutcome,
}

/// Shuffles `data`, trains a head on the first `train_fraction` of it and
/// scores the head before and after training on the rest. Truth rankings
/// come from `measure` over the held-out part; head outputs are compared
/// by Euclidean distance.
pub fn finetune_eval(
    embedder: &Embedder<'_>,
    data: &[Trajectory],
    measure: &Measure,
    train_fraction: f64,
    cfg: &FinetuneConfig,
) -> Result<FinetuneEval> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = (train_fraction * data.len() as f64).round() as usize;
    if n_train < 2 || data.len() - n_train <= 20 {
        return Err(Error::InvalidArgument(format!(
            "fine-tune split of {} trajectories leaves {n_train} for training and {} for testing; need at least 2 and 21",
            data.len(),
            data.len() - n_train
        )));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&order[..n_train]), pick(&order[n_train..]));
    let train_dm = pairwise_matrix(&train, &train, measure, true)?;
    let truth = measure_rankings(&pairwise_matrix(&test, &test, measure, true)?);
    let train_embs = embedder.embed_all(&train)?;
    let test_embs = embedder.embed_all(&test)?;
    let head = FinetuneHead::new(embedder.state.cfg.d, cfg.seed)?;
    let score = |h: &FinetuneHead, label: &str, steps: usize| -> Result<EvalReport> {
        let pred = vector_rankings(&h.apply(&test_embs)?, DistanceKind::Euclidean)?;
        let mut r = EvalReport::new("finetune", cfg.seed);
        r.setting("measure", measure.kind().name())
            .setting("head", label)
            .setting("steps", steps as f64)
            .setting("n_train", train.len() as f64)
            .setting("n_test", test.len() as f64);
        r.metric("hr@5", hr_at_k(&pred, &truth, 5)?)
            .metric("hr@20", hr_at_k(&pred, &truth, 20)?)
            .metric("r5@20", r5_at_20(&pred, &truth)?);
        Ok(r)
    };
    let before = score(&head, "untrained", 0)?;
    let outcome = finetune(&train_embs, &train_dm, head, cfg)?;
    let after = score(&outcome.head, "trained", cfg.steps)?;
    Ok(FinetuneEval { before, after, outcome })
}
