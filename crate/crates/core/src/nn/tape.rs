//! Reverse-mode differentiation over dense matrix nodes.
//!
//! The tape is an append-only list of nodes; each non-leaf node remembers
//! its operation and input ids, enough to replay gradients in reverse.
//! Leaves carry inputs and parameters alike — the caller keeps the ids of
//! the nodes it wants gradients for.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use libm::{floor, tanh};

use super::NnError;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `value = A * B`
    MatMul { a: NodeId, b: NodeId },
    /// `value = A + bias`, bias a `1 x d` row broadcast over rows of A
    AddBias { a: NodeId, bias: NodeId },
    /// `value = A - bias`
    SubBias { a: NodeId, bias: NodeId },
    Relu { a: NodeId },
    /// Finite scalar quantization `floor(m*tanh(x) + 1/2)` with
    /// `m = floor(levels/2)`; straight-through backward `m*(1 - tanh^2)`.
    Fsq { a: NodeId, half_levels: f64 },
    /// Keep the k largest entries per row; the forward mask is the backward
    /// gradient gate.
    TopK { a: NodeId, mask: Vec<bool> },
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseMatrix,
    op: Op,
    grad: Option<DenseMatrix>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let value = broadcast_bias(&self.nodes[a.0].value, &self.nodes[bias.0].value, 1.0)?;
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    pub fn sub_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let value = broadcast_bias(&self.nodes[a.0].value, &self.nodes[bias.0].value, -1.0)?;
        Ok(self.push(value, Op::SubBias { a, bias }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut value = src.clone();
        for r in 0..value.rows() {
            for v in value.row_mut(r) {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        self.push(value, Op::Relu { a })
    }

    pub fn fsq(&mut self, a: NodeId, levels: usize) -> Result<NodeId, NnError> {
        if levels == 0 {
            return Err(NnError::BadLevels { levels });
        }
        let half_levels = (levels / 2) as f64;
        let src = &self.nodes[a.0].value;
        let value = DenseMatrix::from_fn(src.rows(), src.cols(), |r, c| {
            floor(half_levels * tanh(src.get(r, c)) + 0.5)
        })?;
        Ok(self.push(value, Op::Fsq { a, half_levels }))
    }

    pub fn topk(&mut self, a: NodeId, k: usize) -> Result<NodeId, NnError> {
        let src = &self.nodes[a.0].value;
        let cols = src.cols();
        if k == 0 || k > cols {
            return Err(NnError::KOutOfRange { k, len: cols });
        }
        let mut value = src.clone();
        let mut mask = vec![false; src.rows() * cols];
        for r in 0..src.rows() {
            let row_mask = topk_mask(src.row(r), k);
            let out_row = value.row_mut(r);
            for c in 0..cols {
                if row_mask[c] {
                    mask[r * cols + c] = true;
                } else {
                    out_row[c] = 0.0;
                }
            }
        }
        Ok(self.push(value, Op::TopK { a, mask }))
    }

    /// Propagate the seed gradients back to every reachable node. Seeds at
    /// distinct nodes accumulate, so a multi-term loss can be driven in one
    /// pass.
    pub fn backward(&mut self, seeds: Vec<(NodeId, DenseMatrix)>) -> Result<(), NnError> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; n];
        for (id, seed) in seeds {
            let v = &self.nodes[id.0].value;
            if seed.rows() != v.rows() || seed.cols() != v.cols() {
                return Err(NnError::Tensor(crate::tensor::TensorError::DimMismatch {
                    lhs_rows: seed.rows(),
                    lhs_cols: seed.cols(),
                    rhs_rows: v.rows(),
                    rhs_cols: v.cols(),
                }));
            }
            accumulate(&mut grads, id.0, seed)?;
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let pushes: Vec<(usize, DenseMatrix)> = match &self.nodes[i].op {
                Op::Leaf => Vec::new(),
                Op::MatMul { a, b } => {
                    let da = g.matmul_nt(&self.nodes[b.0].value)?;
                    let db = self.nodes[a.0].value.matmul_tn(&g)?;
                    vec![(a.0, da), (b.0, db)]
                }
                Op::AddBias { a, bias } => {
                    vec![(a.0, g.clone()), (bias.0, col_sums(&g))]
                }
                Op::SubBias { a, bias } => {
                    vec![(a.0, g.clone()), (bias.0, col_sums(&g).scaled(-1.0)?)]
                }
                Op::Relu { a } => {
                    let out = &self.nodes[i].value;
                    let da = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                        if out.get(r, c) > 0.0 {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    })?;
                    vec![(a.0, da)]
                }
                Op::Fsq { a, half_levels } => {
                    let src = &self.nodes[a.0].value;
                    let hl = *half_levels;
                    let da = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                        let t = tanh(src.get(r, c));
                        g.get(r, c) * hl * (1.0 - t * t)
                    })?;
                    vec![(a.0, da)]
                }
                Op::TopK { a, mask } => {
                    let cols = g.cols();
                    let da = DenseMatrix::from_fn(g.rows(), cols, |r, c| {
                        if mask[r * cols + c] {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    })?;
                    vec![(a.0, da)]
                }
            };
            for (idx, delta) in pushes {
                accumulate(&mut grads, idx, delta)?;
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }
}

fn accumulate(
    grads: &mut [Option<DenseMatrix>],
    idx: usize,
    delta: DenseMatrix,
) -> Result<(), NnError> {
    match &mut grads[idx] {
        Some(g) => g.add_scaled_assign(1.0, &delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn broadcast_bias(a: &DenseMatrix, bias: &DenseMatrix, sign: f64) -> Result<DenseMatrix, NnError> {
    if bias.rows() != 1 || bias.cols() != a.cols() {
        return Err(NnError::Tensor(crate::tensor::TensorError::DimMismatch {
            lhs_rows: a.rows(),
            lhs_cols: a.cols(),
            rhs_rows: bias.rows(),
            rhs_cols: bias.cols(),
        }));
    }
    let b = bias.row(0);
    Ok(DenseMatrix::from_fn(a.rows(), a.cols(), |r, c| {
        a.get(r, c) + sign * b[c]
    })?)
}

fn col_sums(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let acc = out.row_mut(0);
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    out
}

/// Mask of the k largest entries; ties broken toward the lowest index.
pub(crate) fn topk_mask(row: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; row.len()];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    mask
}
