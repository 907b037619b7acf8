use rand::seq::index;
use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};

/// Shortest trajectory that can be split into targets and context.
pub const MIN_SAMPLE_LEN: usize = 4;

/// Index sets drawn for one trajectory in one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub ratio: f64,
    pub target_masks: Vec<Vec<usize>>,
    /// Whether each target was drawn as a contiguous run.
    pub successive: Vec<bool>,
    pub context_mask: Vec<usize>,
    pub per_target_context: Vec<Vec<usize>>,
    /// Targets whose context needed the empty-overlap fallback.
    pub fallbacks: usize,
}

impl SamplingPlan {
    /// Draws targets and context for a length-`n` trajectory using the
    /// iteration's target ratio.
    pub fn draw<R: Rng + ?Sized>(n: usize, ratio: f64, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (target_masks, successive) = sample_targets(n, ratio, cfg, rng)?;
        let context_mask = sample_context(n, cfg, rng)?;
        let mut fallbacks = 0;
        let per_target_context = target_masks
            .iter()
            .map(|t| {
                let (c, flagged) = remove_overlap(&context_mask, t, n);
                fallbacks += flagged as usize;
                c
            })
            .collect();
        Ok(SamplingPlan {
            ratio,
            target_masks,
            successive,
            context_mask,
            per_target_context,
            fallbacks,
        })
    }
}

/// One target ratio for the iteration, uniform over the configured set.
pub fn draw_ratio<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> f64 {
    cfg.target_ratios[rng.random_range(0..cfg.target_ratios.len())]
}

pub fn target_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

fn check_len(n: usize) -> Result<()> {
    if n < MIN_SAMPLE_LEN {
        return Err(Error::InvalidArgument(format!(
            "trajectory of length {n} is shorter than {MIN_SAMPLE_LEN}"
        )));
    }
    Ok(())
}

/// `cfg.targets` independent masks of size `max(1, round(ratio * n))`, each
/// a contiguous run with probability `successive_p` and a uniform subset
/// otherwise. Masks may overlap one another.
pub fn sample_targets<R: Rng + ?Sized>(
    n: usize,
    ratio: f64,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, Vec<bool>)> {
    check_len(n)?;
    let size = target_size(n, ratio);
    let mut masks = Vec::with_capacity(cfg.targets);
    let mut flags = Vec::with_capacity(cfg.targets);
    for _ in 0..cfg.targets {
        let successive = rng.random_bool(cfg.successive_p);
        masks.push(if successive {
            successive_mask(rng.random_range(0..=n - size), size)
        } else {
            sorted_subset(n, size, rng)
        });
        flags.push(successive);
    }
    Ok((masks, flags))
}

pub fn successive_mask(start: usize, size: usize) -> Vec<usize> {
    (start..start + size).collect()
}

fn sorted_subset<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<usize> {
    let mut v = index::sample(rng, n, size).into_vec();
    v.sort_unstable();
    v
}

/// Uniform subset of size `round(ratio * n)` with the ratio drawn from the
/// configured context range.
pub fn sample_context<R: Rng + ?Sized>(n: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Vec<usize>> {
    check_len(n)?;
    let (lo, hi) = cfg.context_ratio_range;
    let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    Ok(context_of_ratio(n, ratio, rng))
}

pub fn context_of_ratio<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    sorted_subset(n, target_size(n, ratio), rng)
}

/// `context \ target` in context order. If nothing is left, returns the
/// position outside the target farthest from the target's centre (lowest
/// index on ties) and flags the fallback.
pub fn remove_overlap(context: &[usize], target: &[usize], n: usize) -> (Vec<usize>, bool) {
    let rest: Vec<usize> = context.iter().copied().filter(|i| target.binary_search(i).is_err()).collect();
    if !rest.is_empty() || target.is_empty() {
        return (rest, false);
    }
    let centre = (target[0] + target[target.len() - 1]) as f64 / 2.0;
    let pick = (0..n)
        .filter(|i| target.binary_search(i).is_err())
        .fold(None::<(usize, f64)>, |best, i| {
            let d = (i as f64 - centre).abs();
            match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            }
        })
        .map(|(i, _)| vec![i])
        .unwrap_or_default();
    (pick, true)
}
