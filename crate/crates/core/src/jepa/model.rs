//! Parameter layout and differentiable forward passes of the encoders and
//! the predictor.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::adjfuse::AdjFuseRefs;
use crate::error::{Error, Result};
use crate::nn::{Float, ParamRef, ParamSet, Tape, Tensor, Var};

/// Set index of parameters updated by the optimizer.
pub const TRAINABLE: usize = 0;
/// Set index of the EMA-updated target encoder.
pub const TARGET: usize = 1;

#[derive(Debug, Clone)]
pub struct LinearRefs {
    pub w: ParamRef,
    pub b: ParamRef,
}

#[derive(Debug, Clone)]
pub struct NormRefs {
    pub gain: ParamRef,
    pub bias: ParamRef,
}

#[derive(Debug, Clone)]
pub struct AttnRefs {
    pub q: LinearRefs,
    pub k: LinearRefs,
    pub v: LinearRefs,
    pub o: LinearRefs,
}

#[derive(Debug, Clone)]
pub struct FfnRefs {
    pub up: LinearRefs,
    pub down: LinearRefs,
}

#[derive(Debug, Clone)]
pub struct EncoderBlockRefs {
    pub ln1: NormRefs,
    pub attn: AttnRefs,
    pub ln2: NormRefs,
    pub ffn: FfnRefs,
}

#[derive(Debug, Clone)]
pub struct EncoderRefs {
    pub pos: ParamRef,
    pub blocks: Vec<EncoderBlockRefs>,
    pub ln_f: NormRefs,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderBlockRefs {
    pub ln1: NormRefs,
    pub self_attn: AttnRefs,
    pub ln2: NormRefs,
    pub cross_attn: AttnRefs,
    pub ln3: NormRefs,
    pub ffn: FfnRefs,
}

#[derive(Debug, Clone)]
pub struct PredictorRefs {
    pub pos: ParamRef,
    pub mask_token: ParamRef,
    pub blocks: Vec<DecoderBlockRefs>,
    pub ln_f: NormRefs,
    pub out: LinearRefs,
    pub heads: usize,
}

/// Handles of every model parameter inside the (trainable, target) sets.
#[derive(Debug, Clone)]
pub struct Layout {
    pub ctx_enc: EncoderRefs,
    pub tgt_enc: EncoderRefs,
    pub pred: PredictorRefs,
    pub adjfuse: AdjFuseRefs,
    /// `(target index, trainable index)` pairs tied by EMA.
    pub ema_pairs: Vec<(usize, usize)>,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform with the Glorot bound for a `fan_in x fan_out` matrix.
    Glorot,
}

/// Collects parameters in declaration order; without a generator every
/// random init is replaced by zeros, which is enough to learn the shapes.
struct Builder<'r> {
    set: ParamSet<f32>,
    rng: Option<&'r mut dyn RngCore>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match (init, self.rng.as_deref_mut()) {
            (Init::Ones, _) => vec![1.0; n],
            (Init::Zeros, _) | (_, None) => vec![0.0; n],
            (Init::Normal(std), Some(rng)) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| normal.sample(rng) as f32).collect()
            }
            (Init::Glorot, Some(rng)) => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.set.push(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(())
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Glorot)?;
        self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.add(format!("{prefix}.gain"), &[d], Init::Ones)?;
        self.add(format!("{prefix}.bias"), &[d], Init::Zeros)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<()> {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d)?;
        }
        Ok(())
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<()> {
        self.linear(&format!("{prefix}.up"), d, hidden)?;
        self.linear(&format!("{prefix}.down"), hidden, d)
    }

    fn encoder(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<()> {
        let (d, hidden) = (cfg.d, cfg.d * cfg.ffn_mult);
        self.add(format!("pos_emb.{prefix}"), &[cfg.max_len, d], Init::Normal(cfg.init_std))?;
        for i in 0..cfg.enc_layers {
            let p = format!("{prefix}.layers.{i}");
            self.norm(&format!("{p}.ln1"), d)?;
            self.attn(&format!("{p}.attn"), d)?;
            self.norm(&format!("{p}.ln2"), d)?;
            self.ffn(&format!("{p}.ffn"), d, hidden)?;
        }
        self.norm(&format!("{prefix}.ln_f"), d)
    }
}

/// Freshly initialised (trainable, target) parameter sets. The target
/// encoder starts as an exact copy of the context encoder.
pub fn init_params<R: RngCore>(cfg: &ModelConfig, rng: &mut R) -> Result<(ParamSet<f32>, ParamSet<f32>)> {
    build(cfg, Some(rng))
}

fn build(cfg: &ModelConfig, rng: Option<&mut dyn RngCore>) -> Result<(ParamSet<f32>, ParamSet<f32>)> {
    cfg.validate()?;
    let (d, hidden) = (cfg.d, cfg.d * cfg.ffn_mult);
    let mut b = Builder {
        set: ParamSet::new(),
        rng,
    };
    b.encoder("ctx_enc", cfg)?;
    b.add("pos_emb.pred".into(), &[cfg.max_len, d], Init::Normal(cfg.init_std))?;
    b.add("mask_token".into(), &[d], Init::Normal(cfg.init_std))?;
    for i in 0..cfg.pred_layers {
        let p = format!("pred.layers.{i}");
        b.norm(&format!("{p}.ln1"), d)?;
        b.attn(&format!("{p}.self_attn"), d)?;
        b.norm(&format!("{p}.ln2"), d)?;
        b.attn(&format!("{p}.cross_attn"), d)?;
        b.norm(&format!("{p}.ln3"), d)?;
        b.ffn(&format!("{p}.ffn"), d, hidden)?;
    }
    b.norm("pred.ln_f", d)?;
    b.linear("pred.out", d, d)?;
    b.add("adjfuse.kernel".into(), &[3, 3], Init::Zeros)?;
    b.add("adjfuse.bias".into(), &[d], Init::Zeros)?;
    b.add("adjfuse.proj".into(), &[d, d], Init::Normal(cfg.init_std))?;
    let trainable = b.set;

    let mut target = ParamSet::new();
    for (name, t) in trainable.names().iter().zip(trainable.tensors()) {
        if let Some(tgt) = target_name(name) {
            target.push(tgt, t.clone())?;
        }
    }
    Ok((trainable, target))
}

/// Name of the target-encoder twin of a context-encoder parameter.
fn target_name(name: &str) -> Option<String> {
    if name == "pos_emb.ctx_enc" {
        Some("pos_emb.tgt_enc".into())
    } else {
        name.strip_prefix("ctx_enc.").map(|rest| format!("tgt_enc.{rest}"))
    }
}

struct Resolver<'a> {
    set: usize,
    params: &'a ParamSet<f32>,
}

impl Resolver<'_> {
    fn get(&self, name: &str) -> Result<ParamRef> {
        self.params
            .index_of(name)
            .map(|index| ParamRef { set: self.set, index })
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    fn linear(&self, prefix: &str) -> Result<LinearRefs> {
        Ok(LinearRefs {
            w: self.get(&format!("{prefix}.w"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }

    fn norm(&self, prefix: &str) -> Result<NormRefs> {
        Ok(NormRefs {
            gain: self.get(&format!("{prefix}.gain"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }

    fn attn(&self, prefix: &str) -> Result<AttnRefs> {
        Ok(AttnRefs {
            q: self.linear(&format!("{prefix}.q"))?,
            k: self.linear(&format!("{prefix}.k"))?,
            v: self.linear(&format!("{prefix}.v"))?,
            o: self.linear(&format!("{prefix}.o"))?,
        })
    }

    fn ffn(&self, prefix: &str) -> Result<FfnRefs> {
        Ok(FfnRefs {
            up: self.linear(&format!("{prefix}.up"))?,
            down: self.linear(&format!("{prefix}.down"))?,
        })
    }

    fn encoder(&self, prefix: &str, cfg: &ModelConfig) -> Result<EncoderRefs> {
        let blocks = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(EncoderBlockRefs {
                    ln1: self.norm(&format!("{p}.ln1"))?,
                    attn: self.attn(&format!("{p}.attn"))?,
                    ln2: self.norm(&format!("{p}.ln2"))?,
                    ffn: self.ffn(&format!("{p}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderRefs {
            pos: self.get(&format!("pos_emb.{prefix}"))?,
            blocks,
            ln_f: self.norm(&format!("{prefix}.ln_f"))?,
            heads: cfg.enc_heads,
        })
    }
}

impl Layout {
    /// Resolves every handle by name and checks shapes against `cfg`.
    pub fn resolve(cfg: &ModelConfig, trainable: &ParamSet<f32>, target: &ParamSet<f32>) -> Result<Self> {
        let (expect_t, expect_g) = init_shapes(cfg)?;
        for (set, expect) in [(trainable, &expect_t), (target, &expect_g)] {
            if set.len() != expect.len() {
                return Err(Error::Incompatible(format!(
                    "expected {} parameters, found {}",
                    expect.len(),
                    set.len()
                )));
            }
            for (name, shape) in expect {
                match set.get(name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Incompatible(format!(
                            "parameter {name} has shape {:?}, expected {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Incompatible(format!("missing parameter {name}"))),
                }
            }
        }
        let tr = Resolver {
            set: TRAINABLE,
            params: trainable,
        };
        let tg = Resolver {
            set: TARGET,
            params: target,
        };
        let blocks = (0..cfg.pred_layers)
            .map(|i| {
                let p = format!("pred.layers.{i}");
                Ok(DecoderBlockRefs {
                    ln1: tr.norm(&format!("{p}.ln1"))?,
                    self_attn: tr.attn(&format!("{p}.self_attn"))?,
                    ln2: tr.norm(&format!("{p}.ln2"))?,
                    cross_attn: tr.attn(&format!("{p}.cross_attn"))?,
                    ln3: tr.norm(&format!("{p}.ln3"))?,
                    ffn: tr.ffn(&format!("{p}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        let mut ema_pairs = Vec::with_capacity(target.len());
        for (i, name) in trainable.names().iter().enumerate() {
            if let Some(tgt) = target_name(name) {
                ema_pairs.push((tg.get(&tgt)?.index, i));
            }
        }
        Ok(Layout {
            ctx_enc: tr.encoder("ctx_enc", cfg)?,
            tgt_enc: tg.encoder("tgt_enc", cfg)?,
            pred: PredictorRefs {
                pos: tr.get("pos_emb.pred")?,
                mask_token: tr.get("mask_token")?,
                blocks,
                ln_f: tr.norm("pred.ln_f")?,
                out: tr.linear("pred.out")?,
                heads: cfg.pred_heads,
            },
            adjfuse: AdjFuseRefs {
                kernel: tr.get("adjfuse.kernel")?,
                bias: tr.get("adjfuse.bias")?,
                proj: tr.get("adjfuse.proj")?,
            },
            ema_pairs,
        })
    }
}

type Shapes = Vec<(String, Vec<usize>)>;

fn init_shapes(cfg: &ModelConfig) -> Result<(Shapes, Shapes)> {
    let (t, g) = build(cfg, None)?;
    let shapes = |s: &ParamSet<f32>| {
        s.names()
            .iter()
            .zip(s.tensors())
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    };
    Ok((shapes(&t), shapes(&g)))
}

fn linear<T: Float>(tape: &mut Tape<'_, T>, x: Var, r: &LinearRefs) -> Result<Var> {
    let w = tape.param(r.w);
    let b = tape.param(r.b);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm<T: Float>(tape: &mut Tape<'_, T>, x: Var, r: &NormRefs) -> Result<Var> {
    let g = tape.param(r.gain);
    let b = tape.param(r.bias);
    tape.layer_norm(x, g, b)
}

fn attention<T: Float>(tape: &mut Tape<'_, T>, x: Var, kv: Var, r: &AttnRefs, heads: usize) -> Result<Var> {
    let q = linear(tape, x, &r.q)?;
    let k = linear(tape, kv, &r.k)?;
    let v = linear(tape, kv, &r.v)?;
    let a = tape.attention(q, k, v, heads, false)?;
    linear(tape, a, &r.o)
}

fn ffn<T: Float>(tape: &mut Tape<'_, T>, x: Var, r: &FfnRefs) -> Result<Var> {
    let h = linear(tape, x, &r.up)?;
    let h = tape.gelu(h);
    linear(tape, h, &r.down)
}

fn check_positions(positions: &[usize], max_len: usize) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("empty position list".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= max_len) {
        return Err(Error::InvalidArgument(format!("position {p} exceeds max_len {max_len}")));
    }
    Ok(())
}

/// Adds positional embeddings at `positions` to `tokens` (`k x d`) and runs
/// the pre-norm encoder stack; returns `k x d`.
pub fn encode<T: Float>(tape: &mut Tape<'_, T>, r: &EncoderRefs, tokens: Var, positions: &[usize]) -> Result<Var> {
    let pos_table = tape.param(r.pos);
    check_positions(positions, tape.value(pos_table).rows())?;
    if !positions.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument("encoder positions must be strictly increasing".into()));
    }
    if tape.value(tokens).rows() != positions.len() {
        return Err(Error::Shape {
            left: tape.value(tokens).shape().to_vec(),
            right: vec![positions.len()],
            context: "encoder tokens vs positions",
        });
    }
    let pos = tape.gather_rows(pos_table, positions)?;
    let mut x = tape.add(tokens, pos)?;
    for b in &r.blocks {
        let h = norm(tape, x, &b.ln1)?;
        let a = attention(tape, h, h, &b.attn, r.heads)?;
        x = tape.add(x, a)?;
        let h = norm(tape, x, &b.ln2)?;
        let f = ffn(tape, h, &b.ffn)?;
        x = tape.add(x, f)?;
    }
    norm(tape, x, &r.ln_f)
}

/// Predicts representations at `target_positions` from the encoded
/// context (`m x d`); returns `|target_positions| x d`.
pub fn predict<T: Float>(
    tape: &mut Tape<'_, T>,
    r: &PredictorRefs,
    context: Var,
    target_positions: &[usize],
) -> Result<Var> {
    if tape.value(context).rows() == 0 {
        return Err(Error::InvalidArgument("empty context".into()));
    }
    let pos_table = tape.param(r.pos);
    check_positions(target_positions, tape.value(pos_table).rows())?;
    let pos = tape.gather_rows(pos_table, target_positions)?;
    let z = tape.param(r.mask_token);
    let mut x = tape.add_row(pos, z)?;
    for b in &r.blocks {
        let h = norm(tape, x, &b.ln1)?;
        let a = attention(tape, h, h, &b.self_attn, r.heads)?;
        x = tape.add(x, a)?;
        let h = norm(tape, x, &b.ln2)?;
        let c = attention(tape, h, context, &b.cross_attn, r.heads)?;
        x = tape.add(x, c)?;
        let h = norm(tape, x, &b.ln3)?;
        let f = ffn(tape, h, &b.ffn)?;
        x = tape.add(x, f)?;
    }
    let h = norm(tape, x, &r.ln_f)?;
    linear(tape, h, &r.out)
}
