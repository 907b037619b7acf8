//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Parameters
//! enter as leaves borrowed from one or more [`ParamSet`]s; after
//! [`Tape::backward`] their gradients come back keyed by [`ParamRef`].

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::ParamSet;
use super::tensor::{gemm, gemm_strided, Float, Tensor, View};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A parameter addressed by (set, index) within the sets a tape was built
/// over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub set: usize,
    pub index: usize,
}

/// Active positions of a 3x3 neighborhood, row-major.
pub type KernelMask = [bool; 9];

pub const LAYER_NORM_EPS: f64 = 1e-5;

// Keeps the row norm differentiable at zero.
const NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    RowNorm(Var),
    SmoothL1(Var, Var),
    Mse(Var, Var),
    KernelWeights {
        kernel: Var,
        masks: Vec<KernelMask>,
    },
    NeighborMix {
        weights: Var,
        neigh: Tensor<T>,
    },
}

struct Node<'a, T: Float> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'a, T: Float> {
    sets: Vec<&'a ParamSet<T>>,
    nodes: Vec<Node<'a, T>>,
    params: HashMap<ParamRef, Var>,
}

/// Parameter gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    sets: Vec<Vec<Option<Tensor<T>>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, r: ParamRef) -> Option<&Tensor<T>> {
        self.sets.get(r.set)?.get(r.index)?.as_ref()
    }

    /// Gradients of one set, zero-filled for parameters that received none.
    pub fn dense(&self, set: usize, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, p)| match self.sets.get(set).and_then(|s| s.get(i)).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.shape()),
            })
            .collect()
    }

    /// Moves out the dense gradients of one set.
    pub fn take_dense(&mut self, set: usize, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        let slots = self.sets.get_mut(set);
        let mut slots = slots.map(std::mem::take).unwrap_or_default();
        slots.resize_with(params.len(), || None);
        slots
            .into_iter()
            .zip(params.tensors())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

fn shape_err(a: &[usize], b: &[usize], context: &'static str) -> Error {
    Error::Shape {
        left: a.to_vec(),
        right: b.to_vec(),
        context,
    }
}

impl<'a, T: Float> Tape<'a, T> {
    pub fn new(sets: &[&'a ParamSet<T>]) -> Self {
        Tape {
            sets: sets.to_vec(),
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects gradient but is not a parameter (used to probe
    /// input sensitivities in tests).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The parameter leaf for `r`, created on first use.
    pub fn param(&mut self, r: ParamRef) -> Var {
        if let Some(&v) = self.params.get(&r) {
            return v;
        }
        let set: &'a ParamSet<T> = self.sets[r.set];
        self.nodes.push(Node {
            value: Cow::Borrowed(&set.tensors()[r.index]),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(r, v);
        v
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() || tb.shape().len() != 2 {
            return Err(shape_err(ta.shape(), tb.shape(), "matmul_bt"));
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(T::one(), View::of(ta), View::of(tb).t(), T::zero(), out.data_mut(), n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= *y;
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.numel() != ta.cols() {
            return Err(shape_err(ta.shape(), tr.shape(), "add_row"));
        }
        let mut out = ta.clone();
        let c = out.cols();
        for chunk in out.data_mut().chunks_exact_mut(c) {
            for (o, b) in chunk.iter_mut().zip(tr.data()) {
                *o += *b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.max(T::zero());
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = *v;
            *v = half * x * (T::one() + (c * (x + k * x * x * x)).tanh());
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.exp();
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(shape_err(tx.shape(), tg.shape(), "layer_norm"));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_c = T::one() / T::lit(c as f64);
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let o = out.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                o[j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries `q: nq x d` and keys/values `k, v: nk x d`. Heads split the
    /// model dimension into contiguous blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err(tk.shape(), tv.shape(), "attention"));
        }
        let (nq, nk, dh) = (tq.rows(), tk.rows(), d / heads);
        if nk == 0 {
            return Err(Error::InvalidArgument("attention over empty keys".into()));
        }
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = Tensor::zeros(&[nq, d]);
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                scale,
                View::col_block(tq.data(), nq, d, h * dh, dh),
                View::col_block(tk.data(), nk, d, h * dh, dh).t(),
                T::zero(),
                p,
                nk,
            );
            for (i, row) in p.chunks_exact_mut(nk).enumerate() {
                if causal {
                    for s in row.iter_mut().skip(i + 1) {
                        *s = T::neg_infinity();
                    }
                }
                softmax_in_place(row);
            }
            gemm_strided(
                T::one(),
                View::dense(p, nq, nk),
                View::col_block(tv.data(), nk, d, h * dh, dh),
                T::zero(),
                out.data_mut(),
                h * dh,
                d,
            );
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, laid out
    /// `heads x nq x nk`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= ta.rows() {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} rows",
                    ta.rows()
                )));
            }
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Mean over rows: `r x c -> c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if r == 0 {
            return Err(Error::InvalidArgument("mean over zero rows".into()));
        }
        let mut out = Tensor::zeros(&[c]);
        for i in 0..r {
            for (o, v) in out.data_mut().iter_mut().zip(ta.row(i)) {
                *o += *v;
            }
        }
        out.scale_assign(T::one() / T::lit(r as f64));
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::MeanRows(a), ng))
    }

    /// Euclidean norm of each row: `r x c -> r`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let eps = T::lit(NORM_EPS);
        let data = (0..ta.rows())
            .map(|i| (ta.row(i).iter().map(|&v| v * v).sum::<T>() + eps).sqrt())
            .collect::<Vec<_>>();
        let out = Tensor::new(vec![data.len()], data).expect("row_norm shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Mean Smooth-L1 (beta = 1) over all elements.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        tp.same_shape(tt, "smooth_l1")?;
        let half = T::lit(0.5);
        let total: T = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| {
                let x = (p - t).abs();
                if x < T::one() {
                    half * x * x
                } else {
                    x - half
                }
            })
            .sum();
        let out = Tensor::scalar(total / T::lit(tp.numel().max(1) as f64));
        let ng = self.ng(&[pred, target]);
        Ok(self.push(out, Op::SmoothL1(pred, target), ng))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        tp.same_shape(tt, "mse")?;
        let total: T = tp.data().iter().zip(tt.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let out = Tensor::scalar(total / T::lit(tp.numel().max(1) as f64));
        let ng = self.ng(&[pred, target]);
        Ok(self.push(out, Op::Mse(pred, target), ng))
    }

    /// Softmax of a 9-entry kernel restricted to each row's active mask;
    /// inactive slots get weight 0. Output `n x 9`.
    pub fn kernel_weights(&mut self, kernel: Var, masks: &[KernelMask]) -> Result<Var> {
        let tk = self.value(kernel);
        if tk.numel() != 9 {
            return Err(shape_err(tk.shape(), &[3, 3], "kernel_weights"));
        }
        let mut out = Tensor::zeros(&[masks.len(), 9]);
        for (i, mask) in masks.iter().enumerate() {
            let row = out.row_mut(i);
            masked_softmax(tk.data(), mask, row)?;
        }
        let ng = self.ng(&[kernel]);
        Ok(self.push(
            out,
            Op::KernelWeights {
                kernel,
                masks: masks.to_vec(),
            },
            ng,
        ))
    }

    /// `out[i] = sum_j weights[i, j] * neigh[i, j, :]` with constant
    /// neighborhoods `neigh: n x 9 x d`.
    pub fn neighbor_mix(&mut self, weights: Var, neigh: Tensor<T>) -> Result<Var> {
        let tw = self.value(weights);
        let s = neigh.shape();
        if s.len() != 3 || s[1] != 9 || s[0] != tw.rows() || tw.cols() != 9 {
            return Err(shape_err(tw.shape(), s, "neighbor_mix"));
        }
        let (n, d) = (s[0], s[2]);
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let w = tw.row(i);
            let o = out.row_mut(i);
            for (j, &wj) in w.iter().enumerate() {
                if wj == T::zero() {
                    continue;
                }
                let h = &neigh.data()[(i * 9 + j) * d..(i * 9 + j + 1) * d];
                for (ov, hv) in o.iter_mut().zip(h) {
                    *ov += wj * *hv;
                }
            }
        }
        let ng = self.ng(&[weights]);
        Ok(self.push(out, Op::NeighborMix { weights, neigh }, ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads, i);
        }

        let mut sets: Vec<Vec<Option<Tensor<T>>>> = self.sets.iter().map(|s| vec![None; s.len()]).collect();
        for (r, v) in &self.params {
            if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                sets[r.set][r.index] = Some(g);
            }
        }
        Gradients { sets }
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], at: usize) {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {
                // Leaves keep their gradient for collection.
                grads[at] = Some(g);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if want(*a) {
                    let ga = slot(grads, *a, ta.shape());
                    gemm(T::one(), View::dense(g.data(), m, n), View::of(tb).t(), T::one(), ga, k);
                }
                if want(*b) {
                    let gb = slot(grads, *b, tb.shape());
                    gemm(T::one(), View::of(ta).t(), View::dense(g.data(), m, n), T::one(), gb, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if want(*a) {
                    let ga = slot(grads, *a, ta.shape());
                    gemm(T::one(), View::dense(g.data(), m, n), View::of(tb), T::one(), ga, k);
                }
                if want(*b) {
                    let gb = slot(grads, *b, tb.shape());
                    gemm(T::one(), View::dense(g.data(), m, n).t(), View::of(ta), T::one(), gb, k);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if want(x) {
                        axpy(slot(grads, x, val(x).shape()), g.data(), T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    axpy(slot(grads, *a, val(*a).shape()), g.data(), T::one());
                }
                if want(*b) {
                    axpy(slot(grads, *b, val(*b).shape()), g.data(), -T::one());
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    axpy(slot(grads, *a, val(*a).shape()), g.data(), T::one());
                }
                if want(*row) {
                    let gr = slot(grads, *row, val(*row).shape());
                    for chunk in g.data().chunks_exact(gr.len()) {
                        axpy(gr, chunk, T::one());
                    }
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    axpy(slot(grads, *a, val(*a).shape()), g.data(), *s);
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga = slot(grads, *a, val(*a).shape());
                for ((o, &gi), &xi) in ga.iter_mut().zip(g.data()).zip(x) {
                    if xi > T::zero() {
                        *o += gi;
                    }
                }
            }
            Op::Gelu(a) => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let x = val(*a).data();
                let ga = slot(grads, *a, val(*a).shape());
                for ((o, &gi), &xi) in ga.iter_mut().zip(g.data()).zip(x) {
                    let t = (c * (xi + k * xi * xi * xi)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                    *o += gi * (half * (T::one() + t) + half * xi * dt);
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, val(*a).shape());
                for ((o, &gi), &yi) in ga.iter_mut().zip(g.data()).zip(y) {
                    *o += gi * yi;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let ga = slot(grads, *a, val(*a).shape());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = val(*x).cols();
                let rows = val(*x).rows();
                let gv = val(*gain).data();
                if want(*gain) {
                    let gg = slot(grads, *gain, val(*gain).shape());
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g.data()[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if want(*bias) {
                    let gb = slot(grads, *bias, val(*bias).shape());
                    for chunk in g.data().chunks_exact(c) {
                        axpy(gb, chunk, T::one());
                    }
                }
                if want(*x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    let gx = slot(grads, *x, val(*x).shape());
                    let mut dxhat = vec![T::zero(); c];
                    for r in 0..rows {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_c;
                        let mean_dh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, &g, grads),
            Op::GatherRows(a, idx) => {
                let c = val(*a).cols();
                let ga = slot(grads, *a, val(*a).shape());
                for (r, &i) in idx.iter().enumerate() {
                    axpy(&mut ga[i * c..(i + 1) * c], &g.data()[r * c..(r + 1) * c], T::one());
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                let s = T::one() / T::lit(r as f64);
                let ga = slot(grads, *a, val(*a).shape());
                for chunk in ga.chunks_exact_mut(c) {
                    axpy(chunk, g.data(), s);
                }
            }
            Op::RowNorm(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let norms = node.value.data();
                let ga = slot(grads, *a, ta.shape());
                for r in 0..ta.rows() {
                    let s = g.data()[r] / norms[r];
                    axpy(&mut ga[r * c..(r + 1) * c], ta.row(r), s);
                }
            }
            Op::SmoothL1(p, t) => {
                let (tp, tt) = (val(*p), val(*t));
                let inv = g.data()[0] / T::lit(tp.numel().max(1) as f64);
                let deriv: Vec<T> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(&a, &b)| {
                        let x = a - b;
                        if x.abs() < T::one() {
                            x * inv
                        } else {
                            x.signum() * inv
                        }
                    })
                    .collect();
                if want(*p) {
                    axpy(slot(grads, *p, tp.shape()), &deriv, T::one());
                }
                if want(*t) {
                    axpy(slot(grads, *t, tt.shape()), &deriv, -T::one());
                }
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (val(*p), val(*t));
                let s = T::lit(2.0) * g.data()[0] / T::lit(tp.numel().max(1) as f64);
                let deriv: Vec<T> = tp.data().iter().zip(tt.data()).map(|(&a, &b)| (a - b) * s).collect();
                if want(*p) {
                    axpy(slot(grads, *p, tp.shape()), &deriv, T::one());
                }
                if want(*t) {
                    axpy(slot(grads, *t, tt.shape()), &deriv, -T::one());
                }
            }
            Op::KernelWeights { kernel, masks } => {
                let w = &node.value;
                let gk = slot(grads, *kernel, val(*kernel).shape());
                for (i, mask) in masks.iter().enumerate() {
                    let wr = w.row(i);
                    let gr = &g.data()[i * 9..(i + 1) * 9];
                    let dot: T = (0..9).filter(|&j| mask[j]).map(|j| wr[j] * gr[j]).sum();
                    for j in (0..9).filter(|&j| mask[j]) {
                        gk[j] += wr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::NeighborMix { weights, neigh } => {
                let d = neigh.shape()[2];
                let n = neigh.shape()[0];
                let gw = slot(grads, *weights, val(*weights).shape());
                for i in 0..n {
                    let gr = &g.data()[i * d..(i + 1) * d];
                    for j in 0..9 {
                        let h = &neigh.data()[(i * 9 + j) * d..(i * 9 + j + 1) * d];
                        gw[i * 9 + j] += gr.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, nk, d) = (tq.rows(), tk.rows(), tq.cols());
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dp = vec![T::zero(); nq * nk];
        // Gradients are staged locally so that q, k and v may alias.
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            let go = View::col_block(g.data(), nq, d, h * dh, dh);
            // dP = dO_h V_h^T
            gemm(T::one(), go, View::col_block(tv.data(), nk, d, h * dh, dh).t(), T::zero(), &mut dp, nk);
            // dV_h += P^T dO_h
            gemm_strided(T::one(), View::dense(p, nq, nk).t(), go, T::one(), &mut gv, h * dh, d);
            // dS = P * (dP - rowsum(dP * P)) * scale, in place in dp.
            for (pr, dr) in p.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            // dQ_h += dS K_h ; dK_h += dS^T Q_h
            gemm_strided(
                T::one(),
                View::dense(&dp, nq, nk),
                View::col_block(tk.data(), nk, d, h * dh, dh),
                T::one(),
                &mut gq,
                h * dh,
                d,
            );
            gemm_strided(
                T::one(),
                View::dense(&dp, nq, nk).t(),
                View::col_block(tq.data(), nq, d, h * dh, dh),
                T::one(),
                &mut gk,
                h * dh,
                d,
            );
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[x.0].needs_grad {
                axpy(slot(grads, x, self.value(x).shape()), &gx, T::one());
            }
        }
    }
}

fn slot<'g, T: Float>(grads: &'g mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn axpy<T: Float>(y: &mut [T], x: &[T], a: T) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of `kernel` over the active entries of `mask`, zero elsewhere.
pub(crate) fn masked_softmax<T: Float>(kernel: &[T], mask: &KernelMask, out: &mut [T]) -> Result<()> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("kernel mask has no active position".into()));
    }
    let max = (0..9)
        .filter(|&j| mask[j])
        .map(|j| kernel[j])
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for j in 0..9 {
        out[j] = if mask[j] { (kernel[j] - max).exp() } else { T::zero() };
        sum += out[j];
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(())
}
