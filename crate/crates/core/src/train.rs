//! Self-supervised training loop: Adam on the trainable set, EMA into the
//! target encoder, halving schedule, early stopping and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjfuse::AdjFuseInputs;
use crate::cells::{CellGraph, EmbeddingTable};
use crate::error::{Error, Result};
use crate::jepa::{draw_ratio, jepa_forward_with_plan, ModelConfig, ModelState, SamplingPlan, MIN_SAMPLE_LEN};
use crate::nn::{Container, Tensor};
use crate::traj::{CellId, CellTrajectory};

/// Improvement smaller than this does not reset the early-stop counter.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

/// Items per parallel work unit. Reduction happens in item order so the
/// result does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warm_start: Option<PathBuf>,
    /// Monitor held-out loss instead of training loss for early stopping.
    pub monitor_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 1e-4,
            lr_halve_every: 5,
            early_stop_patience: 5,
            batch_size: 64,
            seed: 0,
            warm_start: None,
            monitor_validation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.lr_halve_every == 0 {
            return bad("lr_halve_every must be positive");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * 0.5f64.powi((epoch / cfg.lr_halve_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Wall-clock time, reported live but left out of the log file so logs
    /// stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(TrainLog { records })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: format!("{}: {e}", path.display()),
    }
}

/// Everything the loop reads but does not own.
pub struct TrainEnv<'a> {
    pub table: &'a EmbeddingTable,
    pub graph: &'a CellGraph,
    pub grid_hash: &'a str,
    /// Where to write the last good state if a step produces NaN.
    pub diagnostic_path: Option<&'a Path>,
    pub validation: Option<&'a [CellTrajectory]>,
    pub on_epoch: Option<&'a (dyn Fn(&EpochRecord) + Sync)>,
}

impl<'a> TrainEnv<'a> {
    pub fn new(table: &'a EmbeddingTable, graph: &'a CellGraph, grid_hash: &'a str) -> Self {
        TrainEnv {
            table,
            graph,
            grid_hash,
            diagnostic_path: None,
            validation: None,
            on_epoch: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the end of the epoch with the lowest monitored loss, or the
    /// initial state when no epoch ran.
    pub best: ModelState,
    pub best_epoch: Option<usize>,
    pub last: ModelState,
    pub log: TrainLog,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ratio: f64,
    pub fallbacks: usize,
}

fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step << 24 | 0xff_ffff);
    rng
}

fn item_rng(seed: u64, step: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step << 24 | item as u64);
    rng
}

/// Sum of per-item outputs in item order, computed in parallel chunks.
fn reduce_batch<F>(n_items: usize, n_params: usize, f: F) -> Result<(Vec<Tensor<f32>>, f64, usize)>
where
    F: Fn(usize) -> Result<(f64, usize, Vec<Tensor<f32>>)> + Sync,
{
    let chunks: Vec<(usize, usize)> = (0..n_items)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n_items)))
        .collect();
    let partial = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc: Option<(Vec<Tensor<f32>>, f64, usize)> = None;
            for i in s..e {
                let (loss, fb, grads) = f(i)?;
                acc = Some(match acc {
                    None => (grads, loss, fb),
                    Some((mut g, l, b)) => {
                        for (a, x) in g.iter_mut().zip(&grads) {
                            a.add_assign(x);
                        }
                        (g, l + loss, b + fb)
                    }
                });
            }
            Ok(acc.expect("chunks are nonempty"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partial.into_iter();
    let (mut grads, mut loss, mut fallbacks) = iter.next().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    debug_assert_eq!(grads.len(), n_params);
    for (g, l, b) in iter {
        for (a, x) in grads.iter_mut().zip(&g) {
            a.add_assign(x);
        }
        loss += l;
        fallbacks += b;
    }
    Ok((grads, loss, fallbacks))
}

/// One optimizer step on a batch: a shared target ratio, per-item plans,
/// the mean gradient, Adam on the trainable set, then EMA.
pub fn train_step(
    state: &mut ModelState,
    batch: &[&[CellId]],
    env: &TrainEnv<'_>,
    lr: f64,
    seed: u64,
    step: u64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let ratio = draw_ratio(&state.cfg, &mut batch_rng(seed, step));
    let shared: &ModelState = state;
    let (mut grads, loss_sum, fallbacks) = reduce_batch(batch.len(), shared.trainable().len(), |i| {
        let cells = batch[i];
        let mut rng = item_rng(seed, step, i);
        let plan = SamplingPlan::draw(cells.len(), ratio, &shared.cfg, &mut rng)?;
        let fb = plan.fallbacks;
        let inputs = AdjFuseInputs::<f32>::gather(cells, env.table, env.graph)?;
        let out = jepa_forward_with_plan(&inputs, shared, plan)?;
        Ok((out.loss, fb, out.grads))
    })?;
    let inv = 1.0 / batch.len() as f32;
    for g in &mut grads {
        g.scale_assign(inv);
    }
    state.store.adam_step(&grads, lr)?;
    state.ema_update()?;
    Ok(StepStats {
        loss: loss_sum / batch.len() as f64,
        ratio,
        fallbacks,
    })
}

/// Mean loss over a set with plans drawn from a fixed seed; no update.
pub fn evaluate_loss(state: &ModelState, data: &[CellTrajectory], env: &TrainEnv<'_>, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let losses = data
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = item_rng(seed, u64::MAX >> 24, i);
            let ratio = draw_ratio(&state.cfg, &mut rng);
            let plan = SamplingPlan::draw(t.cells.len(), ratio, &state.cfg, &mut rng)?;
            let inputs = AdjFuseInputs::<f32>::gather(&t.cells, env.table, env.graph)?;
            Ok(jepa_forward_with_plan(&inputs, state, plan)?.loss)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

fn check_dataset(data: &[CellTrajectory], cfg: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for t in data {
        if t.cells.len() < MIN_SAMPLE_LEN || t.cells.len() > cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "trajectory {} has length {}, outside [{MIN_SAMPLE_LEN}, {}]",
                t.source_id,
                t.cells.len(),
                cfg.max_len
            )));
        }
    }
    Ok(())
}

/// Runs the full schedule. The returned `best` state is the one to keep;
/// `last` is where optimization stopped.
pub fn train(data: &[CellTrajectory], mut state: ModelState, env: &TrainEnv<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    state.cfg.validate()?;
    check_dataset(data, &state.cfg)?;
    let validation = match (cfg.monitor_validation, env.validation) {
        (false, _) => None,
        (true, Some(v)) => {
            check_dataset(v, &state.cfg)?;
            Some(v)
        }
        (true, None) => return Err(Error::Config("validation monitoring requested without a validation set".into())),
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut best = state.clone();
    let (mut best_loss, mut best_epoch, mut since_best) = (f64::INFINITY, None, 0usize);
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let (mut loss_sum, mut fallbacks) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[CellId]> = chunk.iter().map(|&i| data[i].cells.as_slice()).collect();
            let step = state.store.step_count();
            let before = env.diagnostic_path.map(|_| state.clone());
            match train_step(&mut state, &batch, env, lr, cfg.seed, step) {
                Ok(s) => {
                    loss_sum += s.loss * batch.len() as f64;
                    fallbacks += s.fallbacks;
                }
                Err(Error::NonFinite(what)) => {
                    let mut msg = format!("{what} at epoch {epoch}, step {step}");
                    if let (Some(path), Some(good)) = (env.diagnostic_path, before) {
                        save_checkpoint(path, &good, env.grid_hash)?;
                        msg.push_str(&format!("; last finite state written to {}", path.display()));
                    }
                    return Err(Error::NonFinite(msg));
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / data.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: train_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            fallbacks,
        };
        if let Some(cb) = env.on_epoch {
            cb(&record);
        }
        log.records.push(record);
        let monitored = match validation {
            Some(v) => evaluate_loss(&state, v, env, cfg.seed)?,
            None => train_loss,
        };
        if monitored < best_loss - IMPROVEMENT_TOL {
            best_loss = monitored;
            best_epoch = Some(epoch);
            best = state.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: state,
        log,
        stopped_early,
    })
}

/// Epoch at which early stopping fires for a sequence of monitored losses,
/// if any.
pub fn early_stop_epoch(losses: &[f64], patience: usize) -> Option<usize> {
    let (mut best, mut since) = (f64::INFINITY, 0);
    for (i, &l) in losses.iter().enumerate() {
        if l < best - IMPROVEMENT_TOL {
            best = l;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                return Some(i);
            }
        }
    }
    None
}

pub fn save_checkpoint(path: &Path, state: &ModelState, grid_hash: &str) -> Result<()> {
    state.to_container(grid_hash, state.store.step_count()).save(path)
}

/// Loads a checkpoint, refusing one built for another grid or, when
/// given, another model configuration. Optimizer moments start fresh.
pub fn load_checkpoint(path: &Path, grid_hash: Option<&str>, expected: Option<&ModelConfig>) -> Result<ModelState> {
    ModelState::from_container(&Container::load(path)?, grid_hash, expected)
}

/// Lowercase hex SHA-256 of a file, used to tie reports to checkpoints.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Random subset of `data` of the given size, for quick validation splits.
pub fn holdout<R: Rng + ?Sized>(data: &[CellTrajectory], n: usize, rng: &mut R) -> (Vec<CellTrajectory>, Vec<CellTrajectory>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let cut = n.min(data.len());
    let mut held: Vec<usize> = idx[..cut].to_vec();
    let mut kept: Vec<usize> = idx[cut..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    (
        kept.into_iter().map(|i| data[i].clone()).collect(),
        held.into_iter().map(|i| data[i].clone()).collect(),
    )
}
