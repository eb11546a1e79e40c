//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Tape`] records every forward op in creation order, which is already a
//! topological order. [`Tape::backward`] walks it in reverse and returns fresh
//! [`Gradients`]; the tape itself is never mutated by a backward pass, so it can
//! be differentiated again or simply dropped. Gradients of a value used more than
//! once are summed.

use super::tensor::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a batch of variable-length sequences packed into one matrix.
///
/// Sequence `i` occupies rows `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    offsets: Vec<usize>,
}

impl SeqLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self { offsets }
    }

    pub fn num_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Layout after a valid (unpadded) convolution that consumes `context`
    /// frames of every sequence.
    pub fn shrink(&self, context: usize) -> Result<Self> {
        let lengths = self.lengths();
        if let Some(&short) = lengths.iter().find(|&&l| l <= context) {
            return Err(Error::shape(
                "conv1d",
                format!("sequence of {short} frames is shorter than the {} frame context", context + 1),
            ));
        }
        Ok(Self::from_lengths(
            &lengths.iter().map(|l| l - context).collect::<Vec<_>>(),
        ))
    }
}

/// Per-column batch statistics observed by a training-mode batch-norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    RowDot { a: Var, b: Var },
    L2Normalize { x: Var, inv_norm: Vec<T>, clamped: Vec<bool> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        dilation: usize,
        input: SeqLayout,
        output: SeqLayout,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    StatsPool {
        x: Var,
        layout: SeqLayout,
        mean: Vec<T>,
        std: Vec<T>,
    },
    ContrastiveNll {
        logits: Var,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    GatherDots {
        q: Var,
        table: Tensor<T>,
        index: Vec<usize>,
        scale: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const L2_NORM_EPS: f64 = 1e-12;
pub const STATS_POOL_EPS: f64 = 1e-10;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_2d("matmul")?;
        let (k2, n) = self.value(b).expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::ONE,
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            T::ZERO,
            out.data_mut(),
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_2d("matmul_nt")?;
        let (n, k2) = self.value(b).expect_2d("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::ONE,
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), n, k).t(),
            T::ZERO,
            out.data_mut(),
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt { a, b }, rg))
    }

    /// Adds a `[c]` vector to every row of `[r,c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).expect_2d("add_row")?;
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.value(a).same_shape(self.value(b), name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::ZERO { v } else { T::ZERO }, Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log { x })
    }

    /// Row-wise softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).expect_2d("softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).expect_2d("log_softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.len().max(1));
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Dot product of matching rows: `[r,c] · [r,c] -> [r]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "row_dot")?;
        let (r, c) = self.value(a).expect_2d("row_dot")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..r)
            .map(|i| dot(&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(out), Op::RowDot { a, b }, rg))
    }

    /// Scales every row to unit Euclidean norm; rows with norm below `ε` are
    /// divided by `ε` instead.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).expect_2d("l2_normalize")?;
        let eps = T::from_f64(L2_NORM_EPS);
        let mut out = self.value(x).clone();
        let mut inv_norm = Vec::with_capacity(out.rows());
        let mut clamped = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let norm = dot(row, row).sqrt();
            let inv = T::ONE / norm.max(eps);
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
            clamped.push(norm < eps);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, inv_norm, clamped }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, c) = self.value(parts[0]).expect_2d("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).expect_2d("concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} and {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `index` of `x`, in that order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).expect_2d("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of a {r}-row matrix")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![index.len(), c], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, _) = self.value(parts[0]).expect_2d("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).expect_2d("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Dilated 1-D convolution over packed sequences, no padding.
    ///
    /// `x: [rows, c_in]` laid out by `layout`, `w: [kernel * c_in, c_out]`
    /// (tap-major), `b: [c_out]`. Returns the output and its shrunken layout.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        layout: &SeqLayout,
        kernel: usize,
        dilation: usize,
    ) -> Result<(Var, SeqLayout)> {
        let (rows, c_in) = self.value(x).expect_2d("conv1d")?;
        let (wr, c_out) = self.value(w).expect_2d("conv1d")?;
        if rows != layout.total_rows() || wr != kernel * c_in || self.value(b).len() != c_out {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?} (layout rows {}), weight {:?}, bias {:?}, kernel {kernel}",
                    self.value(x).shape(),
                    layout.total_rows(),
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let context = (kernel - 1) * dilation;
        let output = layout.shrink(context)?;
        let mut out = Tensor::zeros(&[output.total_rows(), c_out]);
        {
            let (xv, wv, bv) = (
                self.value(x).data(),
                self.value(w).data(),
                self.value(b).data(),
            );
            let lens: Vec<usize> = output.lengths().iter().map(|l| l * c_out).collect();
            let pieces = par::split_lengths(out.data_mut(), &lens);
            par::for_each_mut(pieces, |s, dst| {
                let t_out = dst.len() / c_out;
                let start = layout.range(s).start;
                for tap in 0..kernel {
                    let src = &xv[(start + tap * dilation) * c_in..];
                    gemm(
                        T::ONE,
                        MatRef::row_major(&src[..t_out * c_in], t_out, c_in),
                        MatRef::row_major(&wv[tap * c_in * c_out..(tap + 1) * c_in * c_out], c_in, c_out),
                        if tap == 0 { T::ZERO } else { T::ONE },
                        dst,
                        c_out,
                    );
                }
                for row in dst.chunks_mut(c_out) {
                    for (o, &bb) in row.iter_mut().zip(bv) {
                        *o += bb;
                    }
                }
            });
        }
        let rg = self.rg(&[x, w, b]);
        let var = self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                dilation,
                input: layout.clone(),
                output: output.clone(),
            },
            rg,
        );
        Ok((var, output))
    }

    /// Training-mode batch normalization over the rows of `[r,c]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let (r, c) = self.value(x).expect_2d("batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", "affine parameters must match columns"));
        }
        if r < 2 {
            return Err(Error::Contract(
                "batch_norm in training mode needs at least two rows".into(),
            ));
        }
        let (mean, var_b) = column_moments(self.value(x).data(), r, c);
        let eps = T::from_f64(BATCH_NORM_EPS);
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bta[j]);
            }
        }
        let unbias = T::from_f64(r as f64 / (r as f64 - 1.0));
        let stats = BatchStats {
            mean: mean.clone(),
            var: var_b.iter().map(|&v| v * unbias).collect(),
        };
        let rg = self.rg(&[x, gamma, beta]);
        let var = self.push(
            Tensor::new(vec![r, c], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (_, c) = self.value(x).expect_2d("frozen_norm")?;
        if [
            self.value(gamma).len(),
            self.value(beta).len(),
            running_mean.len(),
            running_var.len(),
        ]
        .iter()
        .any(|&l| l != c)
        {
            return Err(Error::shape("frozen_norm", "statistics must match columns"));
        }
        let eps = T::from_f64(BATCH_NORM_EPS);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::ONE / (v + eps).sqrt())
            .collect();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = g[j] * (row[j] - running_mean[j]) * inv_std[j] + bta[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Per-sequence mean and standard deviation over time, concatenated:
    /// `[rows, c] -> [num_seqs, 2c]`.
    pub fn stats_pool(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let (rows, c) = self.value(x).expect_2d("stats_pool")?;
        if rows != layout.total_rows() {
            return Err(Error::shape(
                "stats_pool",
                format!("{rows} rows but layout covers {}", layout.total_rows()),
            ));
        }
        let n = layout.num_seqs();
        let xv = self.value(x).data();
        let eps = T::from_f64(STATS_POOL_EPS);
        let mut mean = Vec::with_capacity(n * c);
        let mut std = Vec::with_capacity(n * c);
        for s in 0..n {
            let r = layout.range(s);
            if r.is_empty() {
                return Err(Error::shape("stats_pool", "empty sequence"));
            }
            let (m, v) = column_moments(&xv[r.start * c..r.end * c], r.len(), c);
            std.extend(v.iter().map(|&v| (v + eps).sqrt()));
            mean.extend(m);
        }
        let mut out = Vec::with_capacity(n * 2 * c);
        for s in 0..n {
            out.extend_from_slice(&mean[s * c..(s + 1) * c]);
            out.extend_from_slice(&std[s * c..(s + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, 2 * c], out)?,
            Op::StatsPool {
                x,
                layout: layout.clone(),
                mean,
                std,
            },
            rg,
        ))
    }

    /// Mean over rows of a masked softmax cross-entropy with soft targets.
    ///
    /// Row `i` scores `Σ_j w_ij (logsumexp_{k ∈ cand_i} l_ik − l_ij)`. Entries
    /// with `mask = false` are excluded from the normalizer; `weights` must be
    /// non-negative and zero outside the mask.
    pub fn contrastive_nll(&mut self, logits: Var, mask: &[bool], weights: &[T]) -> Result<Var> {
        let (n, m) = self.value(logits).expect_2d("contrastive_nll")?;
        if mask.len() != n * m || weights.len() != n * m {
            return Err(Error::shape(
                "contrastive_nll",
                format!("logits [{n},{m}] with mask {} and weights {}", mask.len(), weights.len()),
            ));
        }
        if n == 0 {
            return Err(Error::Contract("contrastive_nll over zero rows".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::ZERO; n * m];
        let mut total = T::ZERO;
        for i in 0..n {
            let row = i * m..(i + 1) * m;
            let cand = lv[row.clone()]
                .iter()
                .zip(&mask[row.clone()])
                .filter(|(_, &k)| k)
                .map(|(&l, _)| l);
            let lse = log_sum_exp(cand);
            if !lse.is_finite() {
                return Err(Error::Contract(format!(
                    "contrastive_nll row {i} has no finite candidates"
                )));
            }
            for j in row {
                if weights[j] < T::ZERO || (weights[j] != T::ZERO && !mask[j]) {
                    return Err(Error::Contract(format!(
                        "contrastive_nll weight at ({i},{}) outside the candidate set",
                        j - i * m
                    )));
                }
                if mask[j] {
                    probs[j] = (lv[j] - lse).exp();
                    if weights[j] != T::ZERO {
                        total += weights[j] * (lse - lv[j]);
                    }
                }
            }
        }
        let value = total / T::from_usize(n);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::ContrastiveNll {
                logits,
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `out[i, j] = scale[i, j] * q_i · table[index[i, j]]` with a constant
    /// `table: [M, d]`; `index` and `scale` are `n × width`, row-major.
    pub fn gather_dots(
        &mut self,
        q: Var,
        table: Tensor<T>,
        index: Vec<usize>,
        scale: Vec<T>,
        width: usize,
    ) -> Result<Var> {
        let (n, d) = self.value(q).expect_2d("gather_dots")?;
        let (mrows, td) = table.expect_2d("gather_dots")?;
        if td != d || index.len() != n * width || scale.len() != n * width {
            return Err(Error::shape(
                "gather_dots",
                format!("query [{n},{d}], table [{mrows},{td}], {} indices for width {width}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&k| k >= mrows) {
            return Err(Error::shape("gather_dots", format!("index {bad} >= {mrows}")));
        }
        let qv = self.value(q).data();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..width {
                let k = index[i * width + j];
                out.push(scale[i * width + j] * dot(qi, table.row(k)));
            }
        }
        let rg = self.rg(&[q]);
        Ok(self.push(
            Tensor::new(vec![n, width], out)?,
            Op::GatherDots {
                q,
                table,
                index,
                scale,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every value that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).expect_2d("matmul")?;
                let n = self.value(*b).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(
                        T::ONE,
                        MatRef::row_major(gd, m, n),
                        MatRef::row_major(self.value(*b).data(), k, n).t(),
                        T::ONE,
                        ga.data_mut(),
                        k,
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(
                        T::ONE,
                        MatRef::row_major(self.value(*a).data(), m, k).t(),
                        MatRef::row_major(gd, m, n),
                        T::ONE,
                        gb.data_mut(),
                        n,
                    );
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.value(*a).expect_2d("matmul_nt")?;
                let n = self.value(*b).rows();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(
                        T::ONE,
                        MatRef::row_major(gd, m, n),
                        MatRef::row_major(self.value(*b).data(), n, k),
                        T::ONE,
                        ga.data_mut(),
                        k,
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(
                        T::ONE,
                        MatRef::row_major(gd, m, n).t(),
                        MatRef::row_major(self.value(*a).data(), m, k),
                        T::ONE,
                        gb.data_mut(),
                        k,
                    );
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let c = gb.len();
                    accumulate_column_sums(gb.data_mut(), gd, c);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, &v) in gb.data_mut().iter_mut().zip(gd) {
                        *o -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gv), &y) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += gv * y;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &gv) in gx.data_mut().iter_mut().zip(gd) {
                        *o += gv * *factor;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        if v > T::ZERO {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Exp { x } => {
                let yv = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gv), &y) in gx.data_mut().iter_mut().zip(gd).zip(yv) {
                        *o += gv * y;
                    }
                }
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        *o += gv / v;
                    }
                }
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                let yv = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gr), y) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(yv.chunks(c))
                    {
                        let inner = dot(gr, y);
                        for j in 0..c {
                            o[j] += y[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let c = node.value.cols();
                let yv = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gr), y) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(yv.chunks(c))
                    {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..c {
                            o[j] += gr[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let share = gd[0] / T::from_usize(gx.len().max(1));
                    gx.data_mut().iter_mut().for_each(|o| *o += share);
                }
            }
            Op::RowDot { a, b } => {
                let c = self.value(*a).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, row) in ga.data_mut().chunks_mut(c).enumerate() {
                        for j in 0..c {
                            row[j] += gd[i] * bv[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, row) in gb.data_mut().chunks_mut(c).enumerate() {
                        for j in 0..c {
                            row[j] += gd[i] * av[i * c + j];
                        }
                    }
                }
            }
            Op::L2Normalize { x, inv_norm, clamped } => {
                let c = node.value.cols();
                let yv = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, o) in gx.data_mut().chunks_mut(c).enumerate() {
                        let (y, gr) = (&yv[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                        let proj = if clamped[i] { T::ZERO } else { dot(y, gr) };
                        for j in 0..c {
                            o[j] += (gr[j] - y[j] * proj) * inv_norm[i];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (o, &v) in gp.data_mut().iter_mut().zip(&gd[offset..offset + len]) {
                            *o += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &i) in index.iter().enumerate() {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for (i, row) in gp.data_mut().chunks_mut(w).enumerate() {
                            for (o, &v) in row.iter_mut().zip(&gd[i * total + col..i * total + col + w]) {
                                *o += v;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                dilation,
                input,
                output,
            } => self.conv1d_backward(gd, *x, *w, *b, *kernel, *dilation, input, output, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let r = xhat.len() / c;
                let mut sum_dy = vec![T::ZERO; c];
                let mut sum_dy_xhat = vec![T::ZERO; c];
                for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_dy[j] += gr[j];
                        sum_dy_xhat[j] += gr[j] * hr[j];
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (o, &v) in gg.data_mut().iter_mut().zip(&sum_dy_xhat) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for (o, &v) in gb.data_mut().iter_mut().zip(&sum_dy) {
                        *o += v;
                    }
                }
                let gamma_v = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let rn = T::from_usize(r);
                    for (i, o) in gx.data_mut().chunks_mut(c).enumerate() {
                        for j in 0..c {
                            let k = i * c + j;
                            o[j] += gamma_v[j] * inv_std[j] / rn
                                * (rn * gd[k] - sum_dy[j] - xhat[k] * sum_dy_xhat[j]);
                        }
                    }
                }
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let xv = self.value(*x).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    let o = gg.data_mut();
                    for (gr, xr) in gd.chunks(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            o[j] += gr[j] * (xr[j] - mean[j]) * inv_std[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    accumulate_column_sums(gb.data_mut(), gd, c);
                }
                let gamma_v = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, gr) in gx.data_mut().chunks_mut(c).zip(gd.chunks(c)) {
                        for j in 0..c {
                            o[j] += gr[j] * gamma_v[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::StatsPool {
                x,
                layout,
                mean,
                std,
            } => {
                let c = self.value(*x).cols();
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let o = gx.data_mut();
                    for s in 0..layout.num_seqs() {
                        let r = layout.range(s);
                        let len = T::from_usize(r.len());
                        let gm = &gd[s * 2 * c..s * 2 * c + c];
                        let gs = &gd[s * 2 * c + c..(s + 1) * 2 * c];
                        for t in r {
                            for j in 0..c {
                                let k = t * c + j;
                                let centered = xv[k] - mean[s * c + j];
                                o[k] += gm[j] / len + gs[j] * centered / (len * std[s * c + j]);
                            }
                        }
                    }
                }
            }
            Op::ContrastiveNll {
                logits,
                weights,
                probs,
            } => {
                let m = self.value(*logits).cols();
                let n = self.value(*logits).rows();
                let scale = gd[0] / T::from_usize(n);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, o) in gl.data_mut().chunks_mut(m).enumerate() {
                        let row = i * m..(i + 1) * m;
                        let wsum: T = weights[row.clone()].iter().copied().sum();
                        for j in 0..m {
                            let k = i * m + j;
                            o[j] += scale * (wsum * probs[k] - weights[k]);
                        }
                    }
                }
            }
            Op::GatherDots {
                q,
                table,
                index,
                scale,
            } => {
                let d = table.cols();
                let width = node.value.cols();
                if let Some(gq) = self.slot(grads, *q) {
                    for (i, o) in gq.data_mut().chunks_mut(d).enumerate() {
                        for j in 0..width {
                            let k = i * width + j;
                            let coef = gd[k] * scale[k];
                            if coef == T::ZERO {
                                continue;
                            }
                            for (ov, &tv) in o.iter_mut().zip(table.row(index[k])) {
                                *ov += coef * tv;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        gd: &[T],
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        dilation: usize,
        input: &SeqLayout,
        output: &SeqLayout,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let c_in = self.value(x).cols();
        let c_out = self.value(w).cols();
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        if let Some(gb) = self.slot(grads, b) {
            accumulate_column_sums(gb.data_mut(), gd, c_out);
        }
        if let Some(gw) = self.slot(grads, w) {
            let gwd = gw.data_mut();
            for s in 0..output.num_seqs() {
                let out_r = output.range(s);
                let t_out = out_r.len();
                let g_seg = &gd[out_r.start * c_out..out_r.end * c_out];
                let start = input.range(s).start;
                for tap in 0..kernel {
                    let src = &xv[(start + tap * dilation) * c_in..(start + tap * dilation + t_out) * c_in];
                    gemm(
                        T::ONE,
                        MatRef::row_major(src, t_out, c_in).t(),
                        MatRef::row_major(g_seg, t_out, c_out),
                        T::ONE,
                        &mut gwd[tap * c_in * c_out..(tap + 1) * c_in * c_out],
                        c_out,
                    );
                }
            }
        }
        if let Some(gx) = self.slot(grads, x) {
            let lens: Vec<usize> = input.lengths().iter().map(|l| l * c_in).collect();
            let pieces = par::split_lengths(gx.data_mut(), &lens);
            par::for_each_mut(pieces, |s, dst| {
                let out_r = output.range(s);
                let t_out = out_r.len();
                let g_seg = &gd[out_r.start * c_out..out_r.end * c_out];
                for tap in 0..kernel {
                    let off = tap * dilation * c_in;
                    gemm(
                        T::ONE,
                        MatRef::row_major(g_seg, t_out, c_out),
                        MatRef::row_major(&wv[tap * c_in * c_out..(tap + 1) * c_in * c_out], c_in, c_out).t(),
                        T::ONE,
                        &mut dst[off..off + t_out * c_in],
                        c_in,
                    );
                }
            });
        }
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let mut max: Option<T> = None;
    for v in values.clone() {
        max = Some(match max {
            Some(m) => m.max(v),
            None => v,
        });
    }
    let Some(max) = max else {
        return T::from_f64(f64::NEG_INFINITY);
    };
    if !max.is_finite() {
        return max;
    }
    let s: T = values.map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Column means and biased variances of a row-major `[r,c]` block.
fn column_moments<T: Scalar>(data: &[T], r: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let rn = T::from_usize(r);
    let mut mean = vec![T::ZERO; c];
    for row in data.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rn);
    let mut var = vec![T::ZERO; c];
    for row in data.chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rn);
    (mean, var)
}

fn accumulate_column_sums<T: Scalar>(dst: &mut [T], src: &[T], c: usize) {
    for row in src.chunks(c) {
        for (o, &v) in dst.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_zeroes_negatives() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = t.l2_normalize(x).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_of_zero_is_finite() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(&[1, 4]));
        let y = t.l2_normalize(x).unwrap();
        assert!(t.value(y).all_finite());
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().all_finite());
    }

    #[test]
    fn conv_output_length() {
        let mut t = Tape::<f32>::new();
        let layout = SeqLayout::from_lengths(&[10]);
        let x = t.constant(Tensor::zeros(&[10, 2]));
        let w = t.constant(Tensor::zeros(&[5 * 2, 3]));
        let b = t.constant(Tensor::zeros(&[3]));
        let (y, out) = t.conv1d(x, w, b, &layout, 5, 1).unwrap();
        assert_eq!(out.lengths(), vec![6]);
        assert_eq!(t.value(y).shape(), &[6, 3]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2,3] x [2,3]"), "{err}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let p = t.mul(a, c).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(vec![0.5, -1.5]));
        let e = t.exp(x);
        let s = t.sum(e);
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    }
}
