mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tjepa_core::eval::{
    build_query_db, emit_report, finetune, hr_at_k, mean_rank, measure_rankings, r5_at_20, ranking, read_report_json,
    robustness_eval, search_eval, subdatabase, truth_ranks, vector_rankings, Embedder, EvalReport, FinetuneConfig,
    FinetuneHead, Perturbation, QueryDatabase, ReportFormat,
};
use tjepa_core::jepa::{DistanceKind, ModelConfig, ModelState};
use tjepa_core::measures::{pairwise_matrix, Measure, MeasureKind};
use tjepa_core::traj::{PointMetric, Trajectory};

const EUC: DistanceKind = DistanceKind::Euclidean;

fn line(id: &str, n: usize, y: f64) -> Trajectory {
    let xy: Vec<(f64, f64)> = (0..n).map(|i| (i as f64 * 0.5, y)).collect();
    Trajectory::from_xy(id, &xy).unwrap()
}

fn corpus(n: usize) -> Vec<Trajectory> {
    (0..n).map(|i| line(&format!("t{i:03}"), 6 + i % 5, i as f64 * 0.1)).collect()
}

/// Query database whose embeddings are given directly.
fn synthetic_qdb(nq: usize, nd: usize) -> QueryDatabase {
    let t = |i: usize| line(&format!("d{i:03}"), 2, 0.0);
    QueryDatabase {
        queries: (0..nq).map(|i| line(&format!("d{i:03}"), 2, 0.0)).collect(),
        database: (0..nd).map(t).collect(),
        truth: (0..nq).collect(),
    }
}

#[test]
fn query_database_construction() {
    let data = corpus(120);
    let small = build_query_db(&data, 10, 10, 1).unwrap();
    assert_eq!(small.database.len(), 10);
    for (q, &t) in small.queries.iter().zip(&small.truth) {
        assert_eq!(q.id, small.database[t].id);
    }
    let big = build_query_db(&data, 10, 100, 1).unwrap();
    assert_eq!(big.n_fillers(), 90);
    let qids: BTreeSet<&str> = big.queries.iter().map(|q| q.id.as_str()).collect();
    assert!(big.database[10..].iter().all(|d| !qids.contains(d.id.as_str())));
    let ids: BTreeSet<&str> = big.database.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids.len(), 100);
    assert_eq!(big, build_query_db(&data, 10, 100, 1).unwrap());
    assert_ne!(big, build_query_db(&data, 10, 100, 2).unwrap());
    assert!(build_query_db(&data, 10, 121, 1).is_err());
    assert!(build_query_db(&data, 11, 10, 1).is_err());
}

#[test]
fn mean_rank_examples() {
    let qdb = synthetic_qdb(2, 4);
    let db = vec![vec![0.0f32], vec![10.0], vec![1.0], vec![2.0]];
    let q = vec![vec![0.1f32], vec![9.9]];
    assert_eq!(mean_rank(&q, &db, &qdb, 1.0, EUC, 0).unwrap(), 1.0);

    // Truth at 3.0 sits behind 0.0 and 1.0 for a query at 0.4.
    let qdb = synthetic_qdb(1, 4);
    let db = vec![vec![3.0f32], vec![0.0], vec![1.0], vec![9.0]];
    assert_eq!(mean_rank(&[vec![0.4]], &db, &qdb, 1.0, EUC, 0).unwrap(), 3.0);

    // Equal distances fall back to id order: d000 precedes d001.
    let db = vec![vec![1.0f32], vec![-1.0]];
    let qdb2 = QueryDatabase {
        truth: vec![1],
        ..synthetic_qdb(1, 2)
    };
    assert_eq!(truth_ranks(&[vec![0.0]], &db, &qdb2, &[0, 1], EUC).unwrap(), vec![2]);
    assert!(truth_ranks(&[vec![0.0]], &db, &qdb2, &[0], EUC).is_err());
}

#[test]
fn ranking_metric_examples() {
    let a: Vec<usize> = (0..25).collect();
    assert_eq!(hr_at_k(&[a.clone()], &[a.clone()], 5).unwrap(), 1.0);
    let three = vec![0, 1, 2, 10, 11];
    assert!((hr_at_k(&[three], &[a.clone()], 5).unwrap() - 0.6).abs() < 1e-12);
    let disjoint: Vec<usize> = (5..30).collect();
    assert_eq!(hr_at_k(&[disjoint], &[a.clone()], 5).unwrap(), 0.0);
    assert!(hr_at_k(&[vec![1, 2]], &[vec![1, 2]], 3).is_err());

    let mut pred: Vec<usize> = (100..120).collect();
    pred[19] = 4;
    pred[3] = 0;
    assert!((r5_at_20(&[pred.clone()], &[a.clone()]).unwrap() - 0.4).abs() < 1e-12);
    let mut all: Vec<usize> = (100..120).collect();
    all[..5].copy_from_slice(&[3, 1, 2, 0, 4]);
    assert_eq!(r5_at_20(&[all], &[a.clone()]).unwrap(), 1.0);
    assert!(r5_at_20(&[vec![0; 19]], &[a]).is_err());

    assert_eq!(ranking(&[3.0, 1.0, 2.0, 1.0], None), vec![1, 3, 2, 0]);
    assert_eq!(ranking(&[3.0, 1.0, 2.0], Some(1)), vec![2, 0]);
}

#[test]
fn brute_force_parity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let (nq, nd, d) = (rng.random_range(1..6), rng.random_range(6..30), rng.random_range(1..4));
        let mut qdb = synthetic_qdb(nq, nd);
        // Coarse values make distance ties common.
        let mut v = || (0..d).map(|_| rng.random_range(0..3) as f32).collect::<Vec<f32>>();
        let q: Vec<Vec<f32>> = (0..nq).map(|_| v()).collect();
        let db: Vec<Vec<f32>> = (0..nd).map(|_| v()).collect();
        qdb.truth.reverse();
        let ids: Vec<String> = qdb.database.iter().map(|t| t.id.clone()).collect();
        let subset: Vec<usize> = (0..nd).collect();
        let got = truth_ranks(&q, &db, &qdb, &subset, EUC).unwrap();
        for i in 0..nq {
            assert_eq!(got[i], common::oracles::rank_by_sort(&q[i], &db, &ids, &subset, qdb.truth[i]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subdatabases_nest_and_keep_truths(nq in 1usize..10, extra in 0usize..60, seed in 0u64..1000) {
        let qdb = synthetic_qdb(nq, nq + extra);
        let mut prev: Option<BTreeSet<usize>> = None;
        for f in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let s: BTreeSet<usize> = subdatabase(&qdb, f, seed).unwrap().into_iter().collect();
            prop_assert!(qdb.truth.iter().all(|t| s.contains(t)));
            if let Some(p) = &prev {
                prop_assert!(p.is_subset(&s));
            }
            prev = Some(s);
        }
        prop_assert_eq!(prev.unwrap().len(), nq + extra);
    }

    #[test]
    fn mean_rank_bounds(nq in 1usize..6, extra in 0usize..20, seed in 0u64..1000) {
        let qdb = synthetic_qdb(nq, nq + extra);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Vec<f32>> = (0..nq).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let db: Vec<Vec<f32>> = (0..nq + extra).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let sub = subdatabase(&qdb, 0.5, seed).unwrap();
        let mr = mean_rank(&q, &db, &qdb, 0.5, EUC, seed).unwrap();
        prop_assert!(mr >= 1.0 && mr <= sub.len() as f64);
        // Queries that coincide with their truth are always found first.
        let exact: Vec<Vec<f32>> = (0..nq).map(|i| db[qdb.truth[i]].clone()).collect();
        let perfect = mean_rank(&exact, &db, &qdb, 1.0, EUC, seed).unwrap();
        let dupes = (0..nq).any(|i| db.iter().enumerate().any(|(j, v)| j != i && v == &db[i]));
        prop_assert!(perfect == 1.0 || dupes);
    }

    #[test]
    fn hit_ratios_depend_only_on_ranking(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 25;
        let pred_d: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let truth_d: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let rank = |d: &[Vec<f64>]| d.iter().enumerate().map(|(i, r)| ranking(r, Some(i))).collect::<Vec<_>>();
        let warped: Vec<Vec<f64>> = pred_d.iter().map(|r| r.iter().map(|x| (3.0 * x).exp() + 1.0).collect()).collect();
        let (p, t, w) = (rank(&pred_d), rank(&truth_d), rank(&warped));
        for k in [5, 20] {
            prop_assert_eq!(hr_at_k(&p, &t, k).unwrap(), hr_at_k(&w, &t, k).unwrap());
        }
        prop_assert_eq!(r5_at_20(&p, &t).unwrap(), r5_at_20(&w, &t).unwrap());
        prop_assert!(r5_at_20(&p, &t).unwrap() >= hr_at_k(&p, &t, 5).unwrap());
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        enc_layers: 1,
        enc_heads: 2,
        pred_layers: 1,
        pred_heads: 2,
        ffn_mult: 2,
        max_len: 40,
        ..Default::default()
    }
}

#[test]
fn robustness_levels_and_control() {
    let w = common::world(12, 12, 16, 40, (8, 20), 5, true);
    let state = ModelState::new(tiny_model(), 1).unwrap();
    let e = Embedder {
        grid: &w.grid,
        table: &w.table,
        graph: &w.graph,
        state: &state,
    };
    let qdb = build_query_db(&w.trajs, 10, 30, 3).unwrap();
    let plain = search_eval(&e, &qdb, &[1.0], EUC, 9).unwrap();
    for kind in [Perturbation::Downsample, Perturbation::Distort] {
        let control = robustness_eval(&e, &qdb, kind, &[0.0], 1.0, EUC, 9).unwrap();
        assert_eq!(control[0].metrics["mean_rank"], plain[0].metrics["mean_rank"]);
        let rows = robustness_eval(&e, &qdb, kind, &[0.1, 0.2, 0.3, 0.4, 0.5], 1.0, EUC, 9).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows, robustness_eval(&e, &qdb, kind, &[0.1, 0.2, 0.3, 0.4, 0.5], 1.0, EUC, 9).unwrap());
        assert!(rows.iter().all(|r| r.validate().is_ok() && r.protocol == kind.name()));
    }
    let fractions = search_eval(&e, &qdb, &[0.2, 0.6, 1.0], EUC, 9).unwrap();
    assert!(fractions.windows(2).all(|p| p[0].metrics["mean_rank"] <= p[1].metrics["mean_rank"]));
}

#[test]
fn finetune_contract() {
    let w = common::world(12, 12, 16, 60, (8, 20), 6, true);
    let state = ModelState::new(tiny_model(), 1).unwrap();
    let before = state.to_container("g", 0).to_bytes();
    let e = Embedder {
        grid: &w.grid,
        table: &w.table,
        graph: &w.graph,
        state: &state,
    };
    let (train, test) = w.trajs.split_at(36);
    let measure = Measure::new(MeasureKind::Hausdorff, 1.0, PointMetric::Euclidean).unwrap();
    let dm = pairwise_matrix(train, train, &measure, true).unwrap();
    let emb = e.embed_all(train).unwrap();
    let head = FinetuneHead::new(16, 2).unwrap();

    let idle = finetune(&emb, &dm, head.clone(), &FinetuneConfig { steps: 0, ..Default::default() }).unwrap();
    assert_eq!(idle.head, head);
    let mut offdiag: Vec<f64> = (0..36).flat_map(|i| (i + 1..36).map(move |j| (i, j))).map(|(i, j)| dm.get(i, j)).collect();
    offdiag.sort_by(f64::total_cmp);
    let med = 0.5 * (offdiag[offdiag.len() / 2 - 1] + offdiag[offdiag.len() / 2]);
    assert!(((-idle.alpha * med).exp() - 0.5).abs() < 1e-12);

    let cfg = FinetuneConfig {
        steps: 300,
        pairs_per_step: 128,
        ..Default::default()
    };
    let out = finetune(&emb, &dm, head, &cfg).unwrap();
    let early: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
    let late: f64 = out.losses[280..].iter().sum::<f64>() / 20.0;
    assert!(late < early, "{early} -> {late}");
    assert_eq!(state.to_container("g", 0).to_bytes(), before);

    let test_emb = out.head.apply(&e.embed_all(test).unwrap()).unwrap();
    let truth = measure_rankings(&pairwise_matrix(test, test, &measure, true).unwrap());
    let pred = vector_rankings(&test_emb, EUC).unwrap();
    let (hr5, r520) = (hr_at_k(&pred, &truth, 5).unwrap(), r5_at_20(&pred, &truth).unwrap());
    assert!((0.0..=1.0).contains(&hr5) && r520 >= hr5);
    assert!(finetune(&emb[..3], &dm, FinetuneHead::new(16, 2).unwrap(), &cfg).is_err());
}

#[test]
fn reports_round_trip_and_are_stable() {
    let mut a = EvalReport::new("search", 7);
    a.setting("db_fraction", 0.2).setting("measure", "hausdorff").metric("mean_rank", 1.0 / 3.0 + 1.0);
    a.checkpoint_sha = "abc".into();
    let mut b = EvalReport::new("finetune", 7);
    b.metric("hr@5", 0.1 + 0.2).metric("r5@20", 0.7);
    let dir = tempfile::tempdir().unwrap();
    let (j1, j2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    emit_report(&[a.clone(), b.clone()], &j1, ReportFormat::Json).unwrap();
    emit_report(&[a.clone(), b.clone()], &j2, ReportFormat::Json).unwrap();
    assert_eq!(read_report_json(&j1).unwrap(), vec![a.clone(), b.clone()]);
    assert_eq!(std::fs::read(&j1).unwrap(), std::fs::read(&j2).unwrap());
    let text = std::fs::read_to_string(&j1).unwrap();
    let (p, s, m) = (text.find("\"protocol\"").unwrap(), text.find("\"settings\"").unwrap(), text.find("\"metrics\"").unwrap());
    assert!(p < s && s < m);

    let csv = dir.path().join("r.csv");
    emit_report(&[a.clone(), b.clone()], &csv, ReportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "protocol,seed,checkpoint_sha,settings.db_fraction,settings.measure,metrics.hr@5,metrics.mean_rank,metrics.r5@20"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[6].parse::<f64>().unwrap(), a.metrics["mean_rank"]);

    assert!(emit_report(&[], &csv, ReportFormat::Json).is_err());
    let mut bad = EvalReport::new("search", 0);
    bad.metric("mean_rank", 0.5);
    assert!(emit_report(&[bad], &csv, ReportFormat::Csv).is_err());
}
