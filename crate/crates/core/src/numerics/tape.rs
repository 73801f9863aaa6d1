//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; nodes are therefore in
//! topological order by construction and `backward` is a single reverse sweep.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, add_into, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Accumulates into `grads[i]` (pre-sized, zero-filled) the gradient of
    /// the loss with respect to `inputs[i]`, given `out_grad`.
    fn backward(&self, inputs: &[&Tensor<T>], out_grad: &[T], grads: &mut [Vec<T>]);
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulBt {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
    },
    BatchMatMulBt {
        a: Var,
        b: Var,
    },
    GatherDot {
        q: Var,
        table: Var,
        index: Arc<[u32]>,
        index_groups: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    SoftmaxMasked {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Log {
        x: Var,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of a computation, replayed in reverse by [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, k] => Some((*m, *k)),
        _ => None,
    }
}

fn dims3(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [g, m, k] => Some((*g, *m, *k)),
        [m, k] => Some((1, *m, *k)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Registers an input tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// `[m×k] · [k×p] → [m×p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, p) = match (dims2(self.shape(a)), dims2(self.shape(b))) {
            (Some((m, k)), Some((k2, p))) => (m, k, k2, p),
            _ => return Err(self.dim_err("matmul", a, b)),
        };
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * p];
        gemm_nn(&mut out, self.value(a).values(), self.value(b).values(), m, k, p);
        let value = Tensor::new(vec![m, p], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, tracked))
    }

    /// `[m×k] · [p×k]ᵀ → [m×p]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, p, k2) = match (dims2(self.shape(a)), dims2(self.shape(b))) {
            (Some((m, k)), Some((p, k2))) => (m, k, p, k2),
            _ => return Err(self.dim_err("matmul_bt", a, b)),
        };
        if k != k2 {
            return Err(self.dim_err("matmul_bt", a, b));
        }
        let mut out = vec![T::zero(); m * p];
        gemm_nt(&mut out, self.value(a).values(), self.value(b).values(), m, k, p);
        let value = Tensor::new(vec![m, p], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMulBt { a, b }, tracked))
    }

    /// Per-group product `[g×n×m] · [g×m×k] → [g×n×k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, n, m, g2, m2, k) = match (dims3(self.shape(a)), dims3(self.shape(b))) {
            (Some((g, n, m)), Some((g2, m2, k))) => (g, n, m, g2, m2, k),
            _ => return Err(self.dim_err("batch_matmul", a, b)),
        };
        if g != g2 || m != m2 {
            return Err(self.dim_err("batch_matmul", a, b));
        }
        let mut out = vec![T::zero(); g * n * k];
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        for gi in 0..g {
            gemm_nn(
                &mut out[gi * n * k..(gi + 1) * n * k],
                &av[gi * n * m..(gi + 1) * n * m],
                &bv[gi * m * k..(gi + 1) * m * k],
                n,
                m,
                k,
            );
        }
        let value = Tensor::new(vec![g, n, k], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b }, tracked))
    }

    /// Per-group product `[g×n×k] · [g×m×k]ᵀ → [g×n×m]`.
    pub fn batch_matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, n, k, g2, m, k2) = match (dims3(self.shape(a)), dims3(self.shape(b))) {
            (Some((g, n, k)), Some((g2, m, k2))) => (g, n, k, g2, m, k2),
            _ => return Err(self.dim_err("batch_matmul_bt", a, b)),
        };
        if g != g2 || k != k2 {
            return Err(self.dim_err("batch_matmul_bt", a, b));
        }
        let mut out = vec![T::zero(); g * n * m];
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        for gi in 0..g {
            gemm_nt(
                &mut out[gi * n * m..(gi + 1) * n * m],
                &av[gi * n * k..(gi + 1) * n * k],
                &bv[gi * m * k..(gi + 1) * m * k],
                n,
                k,
                m,
            );
        }
        let value = Tensor::new(vec![g, n, m], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::BatchMatMulBt { a, b }, tracked))
    }

    /// `out[g,i,j] = q[g,i,:] · table[index[g,i,j],:]` for `q: [g×n×k]`,
    /// `table: [R×k]`. `index` holds either one `n×n` block shared by all
    /// groups or one block per group.
    pub fn gather_dot(&mut self, q: Var, table: Var, index: Arc<[u32]>) -> Result<Var> {
        let (g, n, k) = dims3(self.shape(q)).ok_or_else(|| self.dim_err("gather_dot", q, table))?;
        let (rows, k2) = dims2(self.shape(table)).ok_or_else(|| self.dim_err("gather_dot", q, table))?;
        if k != k2 {
            return Err(self.dim_err("gather_dot", q, table));
        }
        let block = n * n;
        let index_groups = if index.len() == block {
            1
        } else if index.len() == g * block {
            g
        } else {
            return Err(Error::Shape(format!(
                "gather_dot index of length {} fits neither {} nor {}",
                index.len(),
                block,
                g * block
            )));
        };
        if let Some(&bad) = index.iter().find(|&&r| r as usize >= rows) {
            return Err(Error::Index {
                index: bad as usize,
                bound: rows,
            });
        }
        let (qv, tv) = (self.value(q).values(), self.value(table).values());
        let mut out = vec![T::zero(); g * block];
        for gi in 0..g {
            let ib = if index_groups == 1 { 0 } else { gi * block };
            for i in 0..n {
                let qrow = &qv[(gi * n + i) * k..(gi * n + i + 1) * k];
                for j in 0..n {
                    let r = index[ib + i * n + j] as usize;
                    out[gi * block + i * n + j] = kernels::dot(qrow, &tv[r * k..(r + 1) * k]);
                }
            }
        }
        let value = Tensor::new(vec![g, n, n], out)?;
        let tracked = self.tracked(&[q, table]);
        Ok(self.push(
            value,
            Op::GatherDot {
                q,
                table,
                index,
                index_groups,
            },
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("add", a, b));
        }
        let out: Vec<T> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, tracked))
    }

    /// Adds a `[p]` vector to every row of `a: [..×p]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let p = self.value(a).last_dim();
        if self.value(bias).len() != p || self.shape(bias).len() != 1 {
            return Err(self.dim_err("add_bias", a, bias));
        }
        let bv = self.value(bias).values();
        let out: Vec<T> = self
            .value(a)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % p])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let tracked = self.tracked(&[a, bias]);
        Ok(self.push(value, Op::AddBias { a, bias }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("mul", a, b));
        }
        let out: Vec<T> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.value(a).values().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Scale { a, c }, tracked)
    }

    /// Row-wise softmax over the last axis of `x: [n×m]` or `[g×n×m]`.
    ///
    /// `key_mask` (true = attend) has length `m`, shared by all rows, or
    /// `g·m`, one mask per group. Masked keys get weight exactly zero.
    pub fn softmax_masked(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let (g, n, m) = dims3(self.shape(x)).ok_or_else(|| {
            Error::Shape(format!("softmax_masked expects a matrix, got {:?}", self.shape(x)))
        })?;
        let mask_groups = if key_mask.len() == m {
            1
        } else if key_mask.len() == g * m {
            g
        } else {
            return Err(Error::Dimension {
                op: "softmax_masked",
                left: self.shape(x).to_vec(),
                right: vec![key_mask.len()],
            });
        };
        let xv = self.value(x).values();
        let mut out = vec![T::zero(); g * n * m];
        for gi in 0..g {
            let mask = if mask_groups == 1 {
                key_mask
            } else {
                &key_mask[gi * m..(gi + 1) * m]
            };
            if !mask.iter().any(|&k| k) {
                return Err(Error::EmptyRow { row: gi * n });
            }
            for i in 0..n {
                let base = (gi * n + i) * m;
                let row = &xv[base..base + m];
                let mut max = T::neg_infinity();
                for (j, &s) in row.iter().enumerate() {
                    if mask[j] && s > max {
                        max = s;
                    }
                }
                let mut total = T::zero();
                for j in 0..m {
                    if mask[j] {
                        let e = (row[j] - max).exp();
                        out[base + j] = e;
                        total += e;
                    }
                }
                for o in &mut out[base..base + m] {
                    *o /= total;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SoftmaxMasked { x }, tracked))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(self.dim_err("layer_norm", x, gamma));
        }
        let rows = self.value(x).outer();
        let (xv, gv, bv) = (
            self.value(x).values(),
            self.value(gamma).values(),
            self.value(beta).values(),
        );
        let dn = T::from_usize(d).expect("dim");
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = gv[c] * h + bv[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let tracked = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).values().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Gelu { x }, tracked)
    }

    /// Inverted dropout. Returns `x` itself when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self
            .value(x)
            .values()
            .iter()
            .zip(&mask)
            .map(|(&v, &k)| v * k)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, tracked))
    }

    /// Copies `table` rows; the backward pass scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = dims2(self.shape(table))
            .ok_or_else(|| Error::Shape(format!("gather_rows expects a matrix, got {:?}", self.shape(table))))?;
        let tv = self.value(table).values();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index { index: i, bound: rows });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        let tracked = self.tracked(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            tracked,
        ))
    }

    /// Concatenates `[m×pᵢ]` blocks along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let m = dims2(self.shape(first)).map(|(m, _)| m).ok_or_else(|| self.dim_err("concat_cols", first, first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match dims2(self.shape(p)) {
                Some((mm, w)) if mm == m => widths.push(w),
                _ => return Err(self.dim_err("concat_cols", first, p)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).values();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![m, total], out)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let mut value = value;
        value.set_requires_grad(false);
        value.clear_grad();
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).values().iter().map(|&v| v.ln()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Log { x }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).values().iter().copied().sum::<T>();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, tracked)
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits: [M×C]`. Columns in `excluded` take no probability mass.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], excluded: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(logits))
            .ok_or_else(|| Error::Shape(format!("cross_entropy expects a matrix, got {:?}", self.shape(logits))))?;
        if rows != targets.len() || rows == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut allowed = vec![true; cols];
        for &c in excluded {
            if c < cols {
                allowed[c] = false;
            }
        }
        let lv = self.value(logits).values();
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= cols || !allowed[t] {
                return Err(Error::Index { index: t, bound: cols });
            }
            let row = &lv[r * cols..(r + 1) * cols];
            let mut max = T::neg_infinity();
            for c in 0..cols {
                if allowed[c] && row[c] > max {
                    max = row[c];
                }
            }
            let mut z = T::zero();
            for c in 0..cols {
                if allowed[c] {
                    let e = (row[c] - max).exp();
                    probs[r * cols + c] = e;
                    z += e;
                }
            }
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p /= z;
            }
            total += z.ln() + max - row[t];
        }
        let n = T::from_usize(rows).expect("rows");
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Records an externally computed `value` whose backward rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let tracked = self.tracked(inputs);
        let mut value = value;
        value.set_requires_grad(false);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            tracked,
        )
    }

    /// Reverse sweep from a scalar `loss`. Populates [`Tape::grad`] for every
    /// tracked node and the `grad` field of every tracked leaf tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let grad = g.clone().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.value.set_grad(grad);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(self.shape(*a)).expect("2d");
                let p = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, |da| gemm_nt(da, g, bv, m, p, k));
                self.accumulate(grads, *b, |db| gemm_tn(db, av, g, k, m, p));
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = dims2(self.shape(*a)).expect("2d");
                let p = self.shape(*b)[0];
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, |da| gemm_nn(da, g, bv, m, p, k));
                self.accumulate(grads, *b, |db| gemm_tn(db, g, av, p, m, k));
            }
            Op::BatchMatMul { a, b } => {
                let (gs, n, m) = dims3(self.shape(*a)).expect("3d");
                let k = self.value(*b).last_dim();
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, |da| {
                    for gi in 0..gs {
                        gemm_nt(
                            &mut da[gi * n * m..(gi + 1) * n * m],
                            &g[gi * n * k..(gi + 1) * n * k],
                            &bv[gi * m * k..(gi + 1) * m * k],
                            n,
                            k,
                            m,
                        );
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for gi in 0..gs {
                        gemm_tn(
                            &mut db[gi * m * k..(gi + 1) * m * k],
                            &av[gi * n * m..(gi + 1) * n * m],
                            &g[gi * n * k..(gi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            Op::BatchMatMulBt { a, b } => {
                let (gs, n, k) = dims3(self.shape(*a)).expect("3d");
                let m = self.value(*b).outer() / gs;
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, |da| {
                    for gi in 0..gs {
                        gemm_nn(
                            &mut da[gi * n * k..(gi + 1) * n * k],
                            &g[gi * n * m..(gi + 1) * n * m],
                            &bv[gi * m * k..(gi + 1) * m * k],
                            n,
                            m,
                            k,
                        );
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for gi in 0..gs {
                        gemm_tn(
                            &mut db[gi * m * k..(gi + 1) * m * k],
                            &g[gi * n * m..(gi + 1) * n * m],
                            &av[gi * n * k..(gi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            Op::GatherDot {
                q,
                table,
                index,
                index_groups,
            } => {
                let (gs, n, k) = dims3(self.shape(*q)).expect("3d");
                let block = n * n;
                let (qv, tv) = (self.value(*q).values(), self.value(*table).values());
                let ib = |gi: usize| if *index_groups == 1 { 0 } else { gi * block };
                self.accumulate(grads, *q, |dq| {
                    for gi in 0..gs {
                        for i in 0..n {
                            let drow = &mut dq[(gi * n + i) * k..(gi * n + i + 1) * k];
                            for j in 0..n {
                                let w = g[gi * block + i * n + j];
                                if w != T::zero() {
                                    let r = index[ib(gi) + i * n + j] as usize;
                                    kernels::axpy(drow, w, &tv[r * k..(r + 1) * k]);
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *table, |dt| {
                    for gi in 0..gs {
                        for i in 0..n {
                            let qrow = &qv[(gi * n + i) * k..(gi * n + i + 1) * k];
                            for j in 0..n {
                                let w = g[gi * block + i * n + j];
                                if w != T::zero() {
                                    let r = index[ib(gi) + i * n + j] as usize;
                                    kernels::axpy(&mut dt[r * k..(r + 1) * k], w, qrow);
                                }
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::AddBias { a, bias } => {
                let p = self.value(*bias).len();
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *bias, |db| {
                    for chunk in g.chunks(p) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                });
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, |da| kernels::axpy(da, *c, g));
            }
            Op::SoftmaxMasked { x } => {
                let m = out.last_dim();
                let y = out.values();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..out.outer() {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let inner = kernels::dot(yr, gr);
                        for j in 0..m {
                            dx[r * m + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let rows = out.outer();
                let gv = self.value(*gamma).values();
                let dn = T::from_usize(d).expect("dim");
                self.accumulate(grads, *x, |dx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let s = inv_std[r] / dn;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            dx[r * d + c] += s * (dn * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |dg| {
                    for (i, (&gg, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gg * h;
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for chunk in g.chunks(d) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).values();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gg * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gg), &k) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gg * k;
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = self.value(*table).last_dim();
                self.accumulate(grads, *table, |dt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (m, total) = dims2(out.shape()).expect("2d");
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.accumulate(grads, p, |dp| {
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
            }
            Op::Log { x } => {
                let xv = self.value(*x).values();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gg / v;
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.value(*logits).last_dim();
                let scale = g[0] / T::from_usize(targets.len()).expect("rows");
                self.accumulate(grads, *logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            dl[r * cols + c] += scale * probs[r * cols + c];
                        }
                        dl[r * cols + t] -= scale;
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut local: Vec<Vec<T>> = values.iter().map(|t| vec![T::zero(); t.len()]).collect();
                op.backward(&values, g, &mut local);
                for (&v, lg) in inputs.iter().zip(&local) {
                    self.accumulate(grads, v, |dv| add_into(dv, lg));
                }
            }
        }
    }
}
