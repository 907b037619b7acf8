//! Joint-embedding predictive model over cell trajectories: context and
//! target encoders, the mask-token predictor, sampling and EMA.

mod config;
mod export;
mod model;
mod sampling;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjfuse::{adjfuse_forward, AdjFuseInputs};
use crate::cells::{CellGraph, EmbeddingTable};
use crate::error::{Error, Result};
use crate::nn::{Container, Float, ParamSet, ParamStore, Tape, Tensor, Var};
use crate::traj::{trajectory_to_cells, CellId, GridSpec, Trajectory};

pub use config::{ModelConfig, Pooling};
pub use export::{read_embeddings, write_embeddings};
pub use model::{encode, init_params, predict, EncoderRefs, Layout, PredictorRefs, TARGET, TRAINABLE};
pub use sampling::{
    context_of_ratio, draw_ratio, remove_overlap, sample_context, sample_targets, successive_mask, target_size,
    SamplingPlan, MIN_SAMPLE_LEN,
};

/// All model parameters: the optimizer-owned trainable set and the
/// EMA-only target encoder, which carries no optimizer state.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub target: ParamSet<f32>,
    pub layout: Layout,
}

impl ModelState {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (trainable, target) = init_params(&cfg, &mut rng)?;
        Self::from_parts(cfg, trainable, target)
    }

    pub fn from_parts(cfg: ModelConfig, trainable: ParamSet<f32>, target: ParamSet<f32>) -> Result<Self> {
        let layout = Layout::resolve(&cfg, &trainable, &target)?;
        Ok(ModelState {
            cfg,
            store: ParamStore::new(trainable),
            target,
            layout,
        })
    }

    pub fn trainable(&self) -> &ParamSet<f32> {
        &self.store.params
    }

    /// EMA of the context encoder into the target encoder.
    pub fn ema_update(&mut self) -> Result<()> {
        let m = self.cfg.ema_momentum;
        for &(t, c) in &self.layout.ema_pairs {
            let src = &self.store.params.tensors()[c];
            ema_update(&mut self.target.tensors_mut()[t], src, m)?;
        }
        Ok(())
    }

    pub fn to_container(&self, grid_hash: &str, step: u64) -> Container {
        let tensors = self
            .trainable()
            .names()
            .iter()
            .zip(self.trainable().tensors())
            .chain(self.target.names().iter().zip(self.target.tensors()))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Container {
            grid_hash: grid_hash.to_string(),
            config_text: self.cfg.to_text(),
            step,
            tensors,
        }
    }

    /// Rebuilds a model from a checkpoint container, refusing a different
    /// grid or, when given, a different model configuration.
    pub fn from_container(c: &Container, grid_hash: Option<&str>, expected: Option<&ModelConfig>) -> Result<Self> {
        if let Some(g) = grid_hash {
            if c.grid_hash != g {
                return Err(Error::Incompatible(format!(
                    "checkpoint built for grid {}, expected {g}",
                    c.grid_hash
                )));
            }
        }
        let cfg = ModelConfig::from_text(&c.config_text)?;
        if let Some(e) = expected {
            if e.to_text() != c.config_text {
                return Err(Error::Incompatible("checkpoint model configuration differs from the requested one".into()));
            }
        }
        let (mut trainable, mut target) = (ParamSet::new(), ParamSet::new());
        for (name, t) in &c.tensors {
            let set = if name.starts_with("tgt_enc.") || name == "pos_emb.tgt_enc" {
                &mut target
            } else {
                &mut trainable
            };
            set.push(name.clone(), t.clone())?;
        }
        Self::from_parts(cfg, trainable, target)
    }
}

/// `target <- m * target + (1 - m) * context`, elementwise.
pub fn ema_update<T: Float>(target: &mut Tensor<T>, context: &Tensor<T>, m: f64) -> Result<()> {
    target.same_shape(context, "ema")?;
    let (m, rest) = (T::lit(m), T::lit(1.0 - m));
    for (t, &c) in target.data_mut().iter_mut().zip(context.data()) {
        *t = m * *t + rest * c;
    }
    Ok(())
}

/// Tape handles of one JEPA pass.
pub struct JepaVars {
    pub loss: Var,
    pub targets: Vec<Var>,
    pub predictions: Vec<Var>,
}

/// Builds the JEPA loss for one trajectory on `tape`, whose parameter sets
/// must be `[trainable, target]`. Targets come from the target encoder over
/// the full sequence and are detached; each prediction is decoded from the
/// context encoder's view of that target's context.
pub fn jepa_graph<T: Float>(
    tape: &mut Tape<'_, T>,
    layout: &Layout,
    cfg: &ModelConfig,
    inputs: &AdjFuseInputs<T>,
    plan: &SamplingPlan,
) -> Result<JepaVars> {
    jepa_graph_frozen(tape, layout, cfg, inputs, plan, None)
}

/// `jepa_graph` with the target-encoder output optionally supplied as a
/// constant instead of computed from the current parameters. Finite
/// difference checks need this: the analytic gradient already treats the
/// target branch as constant.
pub fn jepa_graph_frozen<T: Float>(
    tape: &mut Tape<'_, T>,
    layout: &Layout,
    cfg: &ModelConfig,
    inputs: &AdjFuseInputs<T>,
    plan: &SamplingPlan,
    frozen: Option<&Tensor<T>>,
) -> Result<JepaVars> {
    let n = inputs.raw.rows();
    if n < MIN_SAMPLE_LEN || n > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "trajectory length {n} outside [{MIN_SAMPLE_LEN}, {}]",
            cfg.max_len
        )));
    }
    let tokens = if cfg.use_adjfuse {
        adjfuse_forward(tape, layout.adjfuse, inputs)?
    } else {
        tape.constant(inputs.raw.clone())
    };
    let all: Vec<usize> = (0..n).collect();
    let full = match frozen {
        Some(t) => tape.constant(t.clone()),
        None => {
            let frozen_tokens = tape.detach(tokens);
            let full = encode(tape, &layout.tgt_enc, frozen_tokens, &all)?;
            tape.detach(full)
        }
    };

    let m = plan.target_masks.len();
    let (mut targets, mut predictions) = (Vec::with_capacity(m), Vec::with_capacity(m));
    let mut total: Option<Var> = None;
    for (mask, ctx) in plan.target_masks.iter().zip(&plan.per_target_context) {
        let ctx_tokens = tape.gather_rows(tokens, ctx)?;
        let ctx_repr = encode(tape, &layout.ctx_enc, ctx_tokens, ctx)?;
        let pred = predict(tape, &layout.pred, ctx_repr, mask)?;
        let target = tape.gather_rows(full, mask)?;
        let l = tape.smooth_l1(pred, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
        targets.push(target);
        predictions.push(pred);
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("sampling plan has no targets".into()))?;
    let loss = tape.scale(total, T::lit(1.0 / m as f64));
    Ok(JepaVars {
        loss,
        targets,
        predictions,
    })
}

/// Values of one JEPA pass.
#[derive(Debug, Clone)]
pub struct JepaOutput {
    pub loss: f64,
    pub targets: Vec<Tensor<f32>>,
    pub predictions: Vec<Tensor<f32>>,
    pub plan: SamplingPlan,
    /// Gradients of the trainable set, in parameter order.
    pub grads: Vec<Tensor<f32>>,
}

/// Forward and backward pass for one trajectory with a plan drawn from
/// `rng` at the given target ratio.
pub fn jepa_forward<R: Rng + ?Sized>(
    cells: &[CellId],
    table: &EmbeddingTable,
    graph: &CellGraph,
    state: &ModelState,
    ratio: f64,
    rng: &mut R,
) -> Result<JepaOutput> {
    let plan = SamplingPlan::draw(cells.len(), ratio, &state.cfg, rng)?;
    let inputs = AdjFuseInputs::<f32>::gather(cells, table, graph)?;
    jepa_forward_with_plan(&inputs, state, plan)
}

pub fn jepa_forward_with_plan(inputs: &AdjFuseInputs<f32>, state: &ModelState, plan: SamplingPlan) -> Result<JepaOutput> {
    let mut tape = Tape::new(&[state.trainable(), &state.target]);
    let vars = jepa_graph(&mut tape, &state.layout, &state.cfg, inputs, &plan)?;
    let loss = tape.value(vars.loss).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("JEPA loss".into()));
    }
    let mut grads = tape.backward(vars.loss);
    Ok(JepaOutput {
        loss,
        targets: vars.targets.iter().map(|&v| tape.value(v).clone()).collect(),
        predictions: vars.predictions.iter().map(|&v| tape.value(v).clone()).collect(),
        plan,
        grads: grads.take_dense(TRAINABLE, state.trainable()),
    })
}

/// Per-token context-encoder output for a whole cell sequence, without any
/// sampling; `n x d`.
pub fn encode_cells(cells: &[CellId], table: &EmbeddingTable, graph: &CellGraph, state: &ModelState) -> Result<Tensor<f32>> {
    if cells.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if cells.len() > state.cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "trajectory length {} exceeds max_len {}",
            cells.len(),
            state.cfg.max_len
        )));
    }
    let inputs = AdjFuseInputs::<f32>::gather(cells, table, graph)?;
    let mut tape = Tape::new(&[state.trainable(), &state.target]);
    let tokens = if state.cfg.use_adjfuse {
        adjfuse_forward(&mut tape, state.layout.adjfuse, &inputs)?
    } else {
        tape.constant(inputs.raw.clone())
    };
    let positions: Vec<usize> = (0..cells.len()).collect();
    let out = encode(&mut tape, &state.layout.ctx_enc, tokens, &positions)?;
    Ok(tape.value(out).clone())
}

/// Pooled trajectory representation of a cell sequence.
pub fn embed_cells(cells: &[CellId], table: &EmbeddingTable, graph: &CellGraph, state: &ModelState) -> Result<Vec<f32>> {
    let tokens = encode_cells(cells, table, graph, state)?;
    Ok(pool(&tokens, state.cfg.pooling))
}

pub fn pool(tokens: &Tensor<f32>, pooling: Pooling) -> Vec<f32> {
    let (n, d) = (tokens.rows(), tokens.cols());
    match pooling {
        Pooling::Last => tokens.row(n - 1).to_vec(),
        Pooling::Mean => {
            let mut out = vec![0.0f32; d];
            for i in 0..n {
                for (o, v) in out.iter_mut().zip(tokens.row(i)) {
                    *o += *v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n as f32);
            out
        }
    }
}

/// Maps a GPS trajectory onto the grid and embeds it.
pub fn embed_trajectory(
    t: &Trajectory,
    grid: &GridSpec,
    table: &EmbeddingTable,
    graph: &CellGraph,
    state: &ModelState,
) -> Result<Vec<f32>> {
    let cells = trajectory_to_cells(t, grid)?;
    embed_cells(&cells.cells, table, graph, state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    Cosine,
}

pub fn embedding_distance(a: &[f32], b: &[f32], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            left: vec![a.len()],
            right: vec![b.len()],
            context: "embedding distance",
        });
    }
    let pairs = a.iter().zip(b).map(|(&x, &y)| (x as f64, y as f64));
    Ok(match kind {
        DistanceKind::Euclidean => pairs.map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        DistanceKind::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in pairs {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let denom = (na * nb).sqrt();
            if denom == 0.0 {
                1.0
            } else {
                1.0 - dot / denom
            }
        }
    })
}
