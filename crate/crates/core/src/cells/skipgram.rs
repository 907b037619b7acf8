use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use super::{EmbeddingTable, Node2vecConfig};
use crate::error::{Error, Result};

// Learning rate floor as a fraction of the initial rate.
const MIN_LR_FRACTION: f64 = 1e-4;
// Logits are clipped before the sigmoid, as in word2vec.
const MAX_LOGIT: f32 = 6.0;

/// Skip-gram with negative sampling over the walk corpus; returns the
/// input-side vectors. Training is single-threaded and bitwise
/// reproducible under `cfg.seed`.
pub fn train_skipgram(walks: &[Vec<usize>], cfg: &Node2vecConfig, d: usize) -> Result<EmbeddingTable> {
    train(walks, cfg, d, false).map(|(t, _)| t)
}

/// As [`train_skipgram`], also returning the negative-sampling objective
/// after each epoch. The objective is evaluated on a fixed draw of windows
/// and negatives so that successive epochs are directly comparable.
pub fn train_skipgram_logged(
    walks: &[Vec<usize>],
    cfg: &Node2vecConfig,
    d: usize,
) -> Result<(EmbeddingTable, Vec<f64>)> {
    train(walks, cfg, d, true)
}

fn train(walks: &[Vec<usize>], cfg: &Node2vecConfig, d: usize, log: bool) -> Result<(EmbeddingTable, Vec<f64>)> {
    if d == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be at least 1".into()));
    }
    cfg.validate()?;
    let n_nodes = walks.iter().flatten().copied().max().map(|m| m + 1).ok_or_else(|| {
        Error::InvalidArgument("empty walk corpus".into())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / d as f32;
    let mut w_in: Vec<f32> = (0..n_nodes * d).map(|_| rng.random_range(-bound..bound)).collect();
    let mut w_out = vec![0.0f32; n_nodes * d];

    let mut counts = vec![0f64; n_nodes];
    for &v in walks.iter().flatten() {
        counts[v] += 1.0;
    }
    // Nodes never visited keep zero weight; at least one node has a count.
    let noise = WeightedAliasIndex::new(counts.iter().map(|c| c.powf(0.75)).collect())
        .map_err(|e| Error::InvalidArgument(format!("negative sampling table: {e}")))?;

    let tokens: usize = walks.iter().map(Vec::len).sum();
    let total = (tokens * cfg.epochs).max(1) as f64;
    let mut seen = 0usize;
    let mut grad = vec![0.0f32; d];
    let mut losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        for walk in walks {
            for (i, &center) in walk.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - seen as f64 / total)).max(cfg.lr * MIN_LR_FRACTION) as f32;
                seen += 1;
                let reach = rng.random_range(1..=cfg.window);
                let lo = i.saturating_sub(reach);
                let hi = (i + reach).min(walk.len() - 1);
                for (j, &context) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let input = &w_in[center * d..(center + 1) * d];
                    update(input, &mut w_out, context, 1.0, lr, &mut grad, d);
                    for _ in 0..cfg.negatives {
                        let neg = noise.sample(&mut rng);
                        if neg == context {
                            continue;
                        }
                        update(input, &mut w_out, neg, 0.0, lr, &mut grad, d);
                    }
                    for (w, g) in w_in[center * d..(center + 1) * d].iter_mut().zip(&grad) {
                        *w += *g;
                    }
                }
            }
        }
        if log {
            losses.push(objective(walks, &w_in, &w_out, &noise, cfg, d));
        }
    }

    if w_in.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("skip-gram embeddings".into()));
    }
    Ok((EmbeddingTable::new(n_nodes, d, w_in)?, losses))
}

/// Mean pair loss over the corpus with windows and negatives drawn from a
/// generator seeded independently of training.
fn objective(
    walks: &[Vec<usize>],
    w_in: &[f32],
    w_out: &[f32],
    noise: &WeightedAliasIndex<f64>,
    cfg: &Node2vecConfig,
    d: usize,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0b1e);
    let (mut sum, mut pairs) = (0.0f64, 0usize);
    let score = |a: usize, b: usize, label: bool| -> f64 {
        let logit: f32 = w_in[a * d..(a + 1) * d].iter().zip(&w_out[b * d..(b + 1) * d]).map(|(x, y)| x * y).sum();
        let z = logit.clamp(-MAX_LOGIT, MAX_LOGIT) as f64;
        let sig = 1.0 / (1.0 + (-z).exp());
        -(if label { sig } else { 1.0 - sig }).max(1e-7).ln()
    };
    for walk in walks {
        for (i, &center) in walk.iter().enumerate() {
            let reach = rng.random_range(1..=cfg.window);
            let lo = i.saturating_sub(reach);
            let hi = (i + reach).min(walk.len() - 1);
            for (j, &context) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                if j == i {
                    continue;
                }
                sum += score(center, context, true);
                for _ in 0..cfg.negatives {
                    let neg = noise.sample(&mut rng);
                    if neg != context {
                        sum += score(center, neg, false);
                    }
                }
                pairs += 1;
            }
        }
    }
    sum / pairs.max(1) as f64
}

/// One logistic step on `(input, w_out[target])` with label `label`;
/// accumulates the input gradient into `grad`.
fn update(input: &[f32], w_out: &mut [f32], target: usize, label: f32, lr: f32, grad: &mut [f32], d: usize) {
    let out = &mut w_out[target * d..(target + 1) * d];
    let logit: f32 = input.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
    let z = logit.clamp(-MAX_LOGIT, MAX_LOGIT);
    let sig = 1.0 / (1.0 + (-z).exp());
    let g = (label - sig) * lr;
    for k in 0..d {
        grad[k] += g * out[k];
        out[k] += g * input[k];
    }
}
