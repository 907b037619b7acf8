//! Grid-neighbourhood enrichment of cell embeddings.
//!
//! Each point's cell looks at its 3x3 block of grid cells. A learnable 3x3
//! kernel, softmax-normalised over the slots that exist on the grid, mixes
//! the block's embeddings; the mixture goes through bias and ReLU, is
//! projected by a `d x d` map and added back to the point's own embedding.
//!
//! Kernel slots are row-major over rows `r-1..=r+1` and columns
//! `c-1..=c+1`, so slot 4 is the centre cell.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cells::{CellGraph, EmbeddingTable};
use crate::error::{Error, Result};
use crate::nn::{masked_softmax, Float, KernelMask, ParamRef, Tape, Tensor, Var};
use crate::traj::{CellId, CellTrajectory};

/// Kernel, bias and projection of one AdjFuse instance. The projection is
/// stored input-major, so a row vector `h` maps to `h * proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjFuseParams<T> {
    pub kernel: [T; 9],
    pub bias: Vec<T>,
    pub proj: Tensor<T>,
}

impl<T: Float> AdjFuseParams<T> {
    /// Uniform kernel, zero bias and zero projection: the residual bypass.
    pub fn zeros(d: usize) -> Self {
        AdjFuseParams {
            kernel: [T::zero(); 9],
            bias: vec![T::zero(); d],
            proj: Tensor::zeros(&[d, d]),
        }
    }

    /// Uniform kernel, zero bias, projection drawn from `N(0, std^2)`.
    pub fn init<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let proj = (0..d * d).map(|_| T::lit(normal.sample(rng))).collect();
        AdjFuseParams {
            proj: Tensor::new(vec![d, d], proj).expect("square projection"),
            ..Self::zeros(d)
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }
}

/// Softmax of `w` over the active slots of `mask`; inactive slots get 0.
pub fn normalize_kernel<T: Float>(w: &[T; 9], mask: &KernelMask) -> Result<[T; 9]> {
    let mut out = [T::zero(); 9];
    masked_softmax(w, mask, &mut out)?;
    Ok(out)
}

/// `relu(sum_j w[j] * h_j + bias)` over the present neighbourhood slots.
pub fn aggregate<T: Float>(neighborhood: &[Option<&[T]>; 9], w_norm: &[T; 9], bias: &[T]) -> Result<Vec<T>> {
    let d = bias.len();
    let mut acc = bias.to_vec();
    for (slot, (h, &w)) in neighborhood.iter().zip(w_norm).enumerate() {
        let Some(h) = h else { continue };
        if h.len() != d {
            return Err(Error::Shape {
                left: vec![h.len()],
                right: vec![d],
                context: if slot == 4 { "aggregate centre" } else { "aggregate neighbour" },
            });
        }
        for (a, &v) in acc.iter_mut().zip(*h) {
            *a += w * v;
        }
    }
    for a in &mut acc {
        *a = a.max(T::zero());
    }
    Ok(acc)
}

/// Residual fusion `h + h_tilde * proj`.
pub fn fuse<T: Float>(h: &[T], h_tilde: &[T], proj: &Tensor<T>) -> Result<Vec<T>> {
    let d = h.len();
    if h_tilde.len() != d || proj.shape() != [d, d] {
        return Err(Error::Shape {
            left: vec![d, h_tilde.len()],
            right: proj.shape().to_vec(),
            context: "fuse",
        });
    }
    let mut out = h.to_vec();
    for (i, &x) in h_tilde.iter().enumerate() {
        if x == T::zero() {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(proj.row(i)) {
            *o += x * w;
        }
    }
    Ok(out)
}

fn mask_of(block: &[Option<usize>; 9]) -> KernelMask {
    std::array::from_fn(|k| block[k].is_some())
}

fn checked_block(cell: CellId, table: &EmbeddingTable, graph: &CellGraph, position: usize) -> Result<[Option<usize>; 9]> {
    let wrap = |e: Error| Error::at_point(position, e);
    table.lookup(cell).map_err(wrap)?;
    let block = graph.neighborhood(cell.0).map_err(wrap)?;
    if let Some(&bad) = block.iter().flatten().find(|&&j| j >= table.n_nodes()) {
        return Err(wrap(Error::CellOutOfRange {
            index: bad,
            n_nodes: table.n_nodes(),
        }));
    }
    Ok(block)
}

/// Enriched embeddings for a trajectory. Without `selected`, every
/// position is processed; otherwise only the listed positions, in
/// trajectory order. Each position is computed independently.
pub fn apply_to_trajectory(
    cells: &CellTrajectory,
    table: &EmbeddingTable,
    graph: &CellGraph,
    params: &AdjFuseParams<f32>,
    selected: Option<&[usize]>,
) -> Result<Vec<Vec<f32>>> {
    if params.dim() != table.dim() {
        return Err(Error::Shape {
            left: vec![params.dim()],
            right: vec![table.dim()],
            context: "adjfuse dimension",
        });
    }
    let positions: Vec<usize> = match selected {
        None => (0..cells.len()).collect(),
        Some(sel) => {
            let mut s = sel.to_vec();
            s.sort_unstable();
            s.dedup();
            if let Some(&bad) = s.iter().find(|&&i| i >= cells.len()) {
                return Err(Error::InvalidArgument(format!(
                    "selected position {bad} outside trajectory of length {}",
                    cells.len()
                )));
            }
            s
        }
    };
    positions
        .into_iter()
        .map(|i| {
            let cell = cells.cells[i];
            let block = checked_block(cell, table, graph, i)?;
            let w = normalize_kernel(&params.kernel, &mask_of(&block))?;
            let neigh: [Option<&[f32]>; 9] = std::array::from_fn(|k| block[k].map(|j| table.row(j)));
            let h_tilde = aggregate(&neigh, &w, &params.bias)?;
            fuse(table.row(cell.0), &h_tilde, &params.proj)
        })
        .collect()
}

/// Constant inputs of the differentiable AdjFuse pass for a cell sequence:
/// raw embeddings `n x d`, active masks, and neighbourhood blocks
/// `n x 9 x d` (zeros in inactive slots).
pub struct AdjFuseInputs<T> {
    pub raw: Tensor<T>,
    pub masks: Vec<KernelMask>,
    pub neigh: Tensor<T>,
}

impl<T: Float> AdjFuseInputs<T> {
    pub fn gather(cells: &[CellId], table: &EmbeddingTable, graph: &CellGraph) -> Result<Self> {
        let (n, d) = (cells.len(), table.dim());
        let mut raw = Vec::with_capacity(n * d);
        let mut neigh = vec![T::zero(); n * 9 * d];
        let mut masks = Vec::with_capacity(n);
        for (i, &cell) in cells.iter().enumerate() {
            let block = checked_block(cell, table, graph, i)?;
            raw.extend(table.row(cell.0).iter().map(|&v| T::lit(v as f64)));
            for (k, j) in block.iter().enumerate() {
                if let Some(j) = j {
                    let dst = &mut neigh[(i * 9 + k) * d..(i * 9 + k + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(table.row(*j)) {
                        *o = T::lit(v as f64);
                    }
                }
            }
            masks.push(mask_of(&block));
        }
        Ok(AdjFuseInputs {
            raw: Tensor::new(vec![n, d], raw)?,
            masks,
            neigh: Tensor::new(vec![n, 9, d], neigh)?,
        })
    }
}

/// Parameter handles of an AdjFuse instance inside a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdjFuseRefs {
    pub kernel: ParamRef,
    pub bias: ParamRef,
    pub proj: ParamRef,
}

/// Differentiable AdjFuse over all rows of `inputs`; returns `n x d`.
pub fn adjfuse_forward<T: Float>(tape: &mut Tape<'_, T>, refs: AdjFuseRefs, inputs: &AdjFuseInputs<T>) -> Result<Var> {
    let kernel = tape.param(refs.kernel);
    let weights = tape.kernel_weights(kernel, &inputs.masks)?;
    let mixed = tape.neighbor_mix(weights, inputs.neigh.clone())?;
    let bias = tape.param(refs.bias);
    let pre = tape.add_row(mixed, bias)?;
    let h_tilde = tape.relu(pre);
    let proj = tape.param(refs.proj);
    let projected = tape.matmul(h_tilde, proj)?;
    let raw = tape.constant(inputs.raw.clone());
    tape.add(raw, projected)
}
