//! Contrastive objectives and the momentum-contrast negative queue.
//!
//! Every loss is assembled from tape ops, so gradients flow through whichever
//! inputs are leaves. Keys and queue entries are always constants.

mod queue;

pub use queue::{NegativeQueue, UNIT_NORM_TOL};

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SimClr,
    Moco,
    Proto,
    Semi,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(Self::SimClr),
            "moco" => Ok(Self::Moco),
            "proto" => Ok(Self::Proto),
            "semi" => Ok(Self::Semi),
            other => Err(Error::Config(format!(
                "unknown loss kind `{other}` (expected simclr, moco, proto or semi)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SimClr => "simclr",
            Self::Moco => "moco",
            Self::Proto => "proto",
            Self::Semi => "semi",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    /// Weight of the momentum-contrast term in the semi-supervised loss.
    pub lambda: f64,
    /// Weight of the prototype term in the joint loss.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 9.0,
            alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.lambda >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "need tau > 0, lambda >= 0, alpha >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let (n, d) = tape.value(a).expect_2d(op)?;
    let (nb, db) = tape.value(b).expect_2d(op)?;
    if (n, d) != (nb, db) {
        return Err(Error::shape(op, format!("views [{n},{d}] and [{nb},{db}]")));
    }
    if n == 0 {
        return Err(Error::Contract(format!("{op} over an empty batch")));
    }
    Ok((n, d))
}

/// Anchors `view_a[i]` against every other of the `2N` views; the positive is
/// `view_b[i]`.
pub fn simclr_loss<T: Scalar>(tape: &mut Tape<T>, view_a: Var, view_b: Var, tau: f64) -> Result<Var> {
    let (n, _) = check_pair(tape, view_a, view_b, "simclr_loss")?;
    let labels: Vec<Option<usize>> = (0..n).map(Some).collect();
    supcon_loss(tape, view_a, view_b, &labels, tau)
}

/// Supervised contrast: every same-label view among the other `2N − 1` is a
/// positive with weight `1/(2N_y − 1)`.
pub fn supcon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    view_a: Var,
    view_b: Var,
    labels: &[Option<usize>],
    tau: f64,
) -> Result<Var> {
    let (n, _) = check_pair(tape, view_a, view_b, "supcon_loss")?;
    if labels.len() != n {
        return Err(Error::shape("supcon_loss", format!("{} labels for {n} samples", labels.len())));
    }
    let labels: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Contract(format!("sample {i} has no label"))))
        .collect::<Result<_>>()?;
    let m = 2 * n;
    let label_of = |j: usize| labels[j % n];
    let mut count = std::collections::HashMap::new();
    for &l in &labels {
        *count.entry(l).or_insert(0usize) += 1;
    }
    let mut mask = vec![true; n * m];
    let mut weights = vec![T::ZERO; n * m];
    for i in 0..n {
        mask[i * m + i] = false;
        let w = T::ONE / T::from_usize(2 * count[&labels[i]] - 1);
        for j in 0..m {
            if j != i && label_of(j) == labels[i] {
                weights[i * m + j] = w;
            }
        }
    }
    let all = tape.concat_rows(&[view_a, view_b])?;
    let sims = tape.matmul_nt(view_a, all)?;
    let logits = tape.scale(sims, T::from_f64(1.0 / tau));
    tape.contrastive_nll(logits, &mask, &weights)
}

/// InfoNCE of each query against its key plus every queued negative.
///
/// With an empty queue only the positive remains in the normalizer and the
/// loss is zero.
pub fn moco_loss<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: &Tensor<T>,
    queue: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    let (n, d) = tape.value(queries).expect_2d("moco_loss")?;
    if keys.shape() != [n, d] {
        return Err(Error::shape("moco_loss", format!("queries [{n},{d}], keys {:?}", keys.shape())));
    }
    if n == 0 {
        return Err(Error::Contract("moco_loss over an empty batch".into()));
    }
    let k = if queue.is_empty() {
        log::debug!("moco_loss with an empty queue: positive-only normalizer");
        0
    } else {
        let (k, qd) = queue.expect_2d("moco_loss")?;
        if qd != d {
            return Err(Error::shape("moco_loss", format!("{qd}-dim queue for {d}-dim queries")));
        }
        k
    };
    // Columns: the n keys (only the diagonal is a candidate), then the queue.
    let mut table = Vec::with_capacity((n + k) * d);
    table.extend_from_slice(keys.data());
    table.extend_from_slice(queue.data());
    let table = tape.constant(Tensor::new(vec![n + k, d], table)?);
    let sims = tape.matmul_nt(queries, table)?;
    let logits = tape.scale(sims, T::from_f64(1.0 / tau));
    let m = n + k;
    let mut mask = vec![false; n * m];
    let mut weights = vec![T::ZERO; n * m];
    for i in 0..n {
        mask[i * m + i] = true;
        weights[i * m + i] = T::ONE;
        mask[i * m + n..(i + 1) * m].fill(true);
    }
    tape.contrastive_nll(logits, &mask, &weights)
}

/// The terms of the semi-supervised objective, each on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SemiTerms {
    pub total: Var,
    pub moco: Var,
    /// `None` when the batch has no labeled sample.
    pub sup: Option<Var>,
}

/// SupCon over the labeled subset plus `λ`·MoCo over the full batch.
///
/// The supervised term pairs each labeled query with the labeled keys as its
/// second view.
pub fn semi_loss<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: &Tensor<T>,
    labels: &[Option<usize>],
    queue: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    Ok(semi_terms(tape, queries, keys, labels, queue, cfg)?.total)
}

pub fn semi_terms<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: &Tensor<T>,
    labels: &[Option<usize>],
    queue: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<SemiTerms> {
    let n = tape.value(queries).rows();
    if labels.len() != n {
        return Err(Error::shape("semi_loss", format!("{} labels for {n} samples", labels.len())));
    }
    let moco = moco_loss(tape, queries, keys, queue, cfg.tau)?;
    let weighted = tape.scale(moco, T::from_f64(cfg.lambda));
    let labeled: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
    if labeled.is_empty() {
        log::warn!("semi_loss: no labeled samples in batch, supervised term is zero");
        return Ok(SemiTerms {
            total: weighted,
            moco,
            sup: None,
        });
    }
    let qa = tape.gather_rows(queries, &labeled)?;
    let kb = tape.constant(gather(keys, &labeled));
    let sub: Vec<Option<usize>> = labeled.iter().map(|&i| labels[i]).collect();
    let sup = supcon_loss(tape, qa, kb, &sub, cfg.tau)?;
    Ok(SemiTerms {
        total: tape.add(sup, weighted)?,
        moco,
        sup: Some(sup),
    })
}

fn gather<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let c = t.cols();
    let data = rows.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![rows.len(), c], data).expect("rows of a matrix")
}
