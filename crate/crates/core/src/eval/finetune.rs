use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ranking;
use crate::error::{Error, Result};
use crate::measures::DistanceMatrix;
use crate::nn::{AdamConfig, ParamRef, ParamSet, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub pairs_per_step: usize,
    /// Share of pairs whose partner is one of the anchor's `near_k`
    /// nearest trajectories under the measure; the rest are uniform.
    pub near_fraction: f64,
    pub near_k: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 3000,
            lr: 1e-3,
            pairs_per_step: 256,
            near_fraction: 0.5,
            near_k: 10,
            seed: 0,
        }
    }
}

/// Two-layer MLP on top of frozen trajectory embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneHead {
    pub params: ParamSet<f32>,
}

const L1_W: usize = 0;
const L1_B: usize = 1;
const L2_W: usize = 2;
const L2_B: usize = 3;

impl FinetuneHead {
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("head dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (2 * d) as f64).sqrt() as f32;
        let mut glorot = || Tensor::new(vec![d, d], (0..d * d).map(|_| rng.random_range(-limit..limit)).collect());
        let mut params = ParamSet::new();
        params.push("head.l1.w", glorot()?)?;
        params.push("head.l1.b", Tensor::zeros(&[d]))?;
        params.push("head.l2.w", glorot()?)?;
        params.push("head.l2.b", Tensor::zeros(&[d]))?;
        Ok(FinetuneHead { params })
    }

    pub fn dim(&self) -> usize {
        self.params.tensors()[L1_B].numel()
    }

    pub fn apply(&self, embeddings: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let x = stack(embeddings, self.dim())?;
        let mut tape = Tape::new(&[&self.params]);
        let xv = tape.constant(x);
        let out = head_graph(&mut tape, xv)?;
        let out = tape.value(out);
        Ok((0..out.rows()).map(|i| out.row(i).to_vec()).collect())
    }
}

fn head_graph(tape: &mut Tape<'_, f32>, x: crate::nn::Var) -> Result<crate::nn::Var> {
    let p = |index| ParamRef { set: 0, index };
    let (w1, b1, w2, b2) = (tape.param(p(L1_W)), tape.param(p(L1_B)), tape.param(p(L2_W)), tape.param(p(L2_B)));
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add_row(y, b2)
}

fn stack(rows: &[Vec<f32>], d: usize) -> Result<Tensor<f32>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no embeddings".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::Shape {
            left: vec![bad.len()],
            right: vec![d],
            context: "fine-tune input",
        });
    }
    Tensor::new(vec![rows.len(), d], rows.concat())
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head: FinetuneHead,
    /// Similarity scale: `exp(-alpha * d)` is 0.5 at the median pair.
    pub alpha: f64,
    pub losses: Vec<f64>,
}

fn median_offdiagonal(m: &DistanceMatrix) -> Result<f64> {
    let mut v: Vec<f64> = (0..m.rows())
        .flat_map(|i| (i + 1..m.cols()).map(move |j| (i, j)))
        .map(|(i, j)| m.get(i, j))
        .collect();
    if v.is_empty() {
        return Err(Error::InvalidArgument("need at least two training trajectories".into()));
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Trains a head so that `exp(-alpha * |h(x_i) - h(x_j)|)` regresses
/// `exp(-alpha * d_measure(i, j))` over random pairs. Only the head is on
/// the tape; the embeddings are constants.
pub fn finetune(
    embeddings: &[Vec<f32>],
    distances: &DistanceMatrix,
    head: FinetuneHead,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let n = embeddings.len();
    if distances.rows() != n || distances.cols() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} embeddings but a {}x{} distance matrix",
            distances.rows(),
            distances.cols()
        )));
    }
    if cfg.pairs_per_step == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("finetune: pairs_per_step and lr must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.near_fraction) || (cfg.near_fraction > 0.0 && cfg.near_k == 0) {
        return Err(Error::Config("finetune: near_fraction must lie in [0, 1] with near_k > 0".into()));
    }
    let median = median_offdiagonal(distances)?;
    if !(median > 0.0 && median.is_finite()) {
        return Err(Error::InvalidArgument(format!("median training distance {median} cannot calibrate alpha")));
    }
    let alpha = std::f64::consts::LN_2 / median;
    let x = stack(embeddings, head.dim())?;
    let mut store = ParamStore::new(head.params);
    store.adam = AdamConfig::default();
    let near: Vec<Vec<usize>> = measure_rankings(distances)
        .into_iter()
        .map(|mut r| {
            r.truncate(cfg.near_k);
            r
        })
        .collect();
    let n_near = (cfg.near_fraction * cfg.pairs_per_step as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (mut left, mut right, mut sim) = (Vec::new(), Vec::new(), Vec::new());
        while left.len() < cfg.pairs_per_step {
            let i = rng.random_range(0..n);
            let j = if left.len() < n_near {
                near[i][rng.random_range(0..near[i].len())]
            } else {
                rng.random_range(0..n)
            };
            if i != j {
                left.push(i);
                right.push(j);
                sim.push((-alpha * distances.get(i, j)).exp() as f32);
            }
        }
        let mut tape = Tape::new(&[&store.params]);
        let xv = tape.constant(x.clone());
        let h = head_graph(&mut tape, xv)?;
        let a = tape.gather_rows(h, &left)?;
        let b = tape.gather_rows(h, &right)?;
        let diff = tape.sub(a, b)?;
        let dist = tape.row_norm(diff);
        let scaled = tape.scale(dist, -alpha as f32);
        let pred = tape.exp(scaled);
        let target = tape.constant(Tensor::new(vec![sim.len()], sim)?);
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fine-tune loss at step {}", losses.len())));
        }
        losses.push(value);
        let grads = tape.backward(loss).dense(0, &store.params);
        store.adam_step(&grads, cfg.lr)?;
    }
    Ok(FinetuneOutcome {
        head: FinetuneHead { params: store.params },
        alpha,
        losses,
    })
}

/// Per-row ranking of a square measure matrix, leaving out the diagonal.
pub fn measure_rankings(m: &DistanceMatrix) -> Vec<Vec<usize>> {
    (0..m.rows()).map(|i| ranking(m.row(i), Some(i))).collect()
}
