//! Spherical k-means prototypes, per-cluster concentration and the
//! prototype contrastive term.

use rand::Rng;

use crate::contrastive::{moco_loss, LossConfig};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{ByteReader, ByteWriter};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoConfig {
    pub num_clusters: usize,
    pub num_negatives: usize,
    pub warmup_epochs: usize,
    pub eps: f64,
    pub max_iters: usize,
    /// Lloyd stops once fewer than this fraction of assignments change.
    pub tol: f64,
    pub cluster_every: usize,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            num_clusters: 5000,
            num_negatives: 10000,
            warmup_epochs: 60,
            eps: 1e-2,
            max_iters: 50,
            tol: 1e-3,
            cluster_every: 1,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 || self.num_negatives < 1 || self.cluster_every < 1 || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "need clusters >= 2, negatives >= 1, cluster_every >= 1, eps > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `[M, d]`, unit rows.
    pub centroids: Tensor<f32>,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// `Σ (1 − cos)` after every Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Index and cosine of the closest centroid to every point.
fn assign(points: &Tensor<f32>, centroids: &Tensor<f32>) -> Vec<(usize, f64)> {
    let m = centroids.rows();
    par::map_range(points.rows(), |i| {
        let p = points.row(i);
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..m {
            let s = dot(p, centroids.row(k));
            if s > best.1 {
                best = (k, s);
            }
        }
        best
    })
}

fn chord(points: &Tensor<f32>, i: usize, j: usize) -> f64 {
    (2.0 - 2.0 * dot(points.row(i), points.row(j))).max(0.0)
}

/// Greedy k-means++: each step draws `2 + ln m` candidates in proportion to
/// their squared distance and keeps the one that lowers the potential most.
fn plus_plus_init<R: Rng + ?Sized>(points: &Tensor<f32>, m: usize, rng: &mut R) -> Tensor<f32> {
    let (n, d) = (points.rows(), points.cols());
    let trials = 2 + (m as f64).ln() as usize;
    let mut chosen = vec![rng.random_range(0..n)];
    // Squared chord distance 2(1 − cos) to the nearest chosen centroid.
    let mut dist: Vec<f64> = (0..n).map(|i| chord(points, i, chosen[0])).collect();
    while chosen.len() < m {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut target = rng.random_range(0.0..total);
                let mut pick = n - 1;
                for (i, &w) in dist.iter().enumerate() {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let next: Vec<f64> = par::map_range(n, |i| dist[i].min(chord(points, i, cand)));
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, next));
            }
        }
        let (_, cand, next) = best.expect("at least one trial");
        chosen.push(cand);
        dist = next;
    }
    let data = chosen.iter().flat_map(|&i| points.row(i).to_vec()).collect();
    Tensor::new(vec![m, d], data).expect("centroid shape")
}

/// Spherical k-means with k-means++ seeding.
pub fn kmeans<R: Rng + ?Sized>(
    points: &Tensor<f32>,
    m: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<KMeans> {
    let (n, d) = points.expect_2d("kmeans")?;
    if m == 0 || n < m {
        return Err(Error::Contract(format!("cannot form {m} clusters from {n} points")));
    }
    let mut centroids = plus_plus_init(points, m, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let best = assign(points, &centroids);
        let changed = best
            .iter()
            .zip(&assignments)
            .filter(|((k, _), &old)| *k != old)
            .count();
        let mut cos: Vec<f64> = best.iter().map(|&(_, s)| s).collect();
        for (a, &(k, _)) in assignments.iter_mut().zip(&best) {
            *a = k;
        }
        repair_empty(points, &mut centroids, &mut assignments, &mut cos)?;

        let mut sums = vec![0.0f64; m * d];
        for (i, &k) in assignments.iter().enumerate() {
            for (s, &v) in sums[k * d..(k + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        for k in 0..m {
            let s = &mut sums[k * d..(k + 1) * d];
            if normalize(s) {
                for (c, &v) in centroids.row_mut(k).iter_mut().zip(s.iter()) {
                    *c = v as f32;
                }
            }
        }
        inertia.push(
            (0..n)
                .map(|i| 1.0 - dot(points.row(i), centroids.row(assignments[i])))
                .sum(),
        );
        if (changed as f64) < tol * n as f64 {
            break;
        }
    }
    let mut sizes = vec![0; m];
    for &k in &assignments {
        sizes[k] += 1;
    }
    Ok(KMeans {
        centroids,
        assignments,
        sizes,
        inertia,
        iterations,
    })
}

/// Moves the worst-fitting point of the largest cluster into every empty
/// cluster.
fn repair_empty(
    points: &Tensor<f32>,
    centroids: &mut Tensor<f32>,
    assignments: &mut [usize],
    cos: &mut [f64],
) -> Result<()> {
    let m = centroids.rows();
    let mut sizes = vec![0usize; m];
    for &k in assignments.iter() {
        sizes[k] += 1;
    }
    for empty in 0..m {
        if sizes[empty] > 0 {
            continue;
        }
        let largest = (0..m).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))).unwrap_or(0);
        if sizes[largest] < 2 {
            return Err(Error::Clustering(format!(
                "cluster {empty} is empty and no cluster has a point to spare"
            )));
        }
        let far = (0..assignments.len())
            .filter(|&i| assignments[i] == largest)
            .min_by(|&a, &b| cos[a].total_cmp(&cos[b]))
            .expect("largest cluster is non-empty");
        assignments[far] = empty;
        cos[far] = 1.0;
        sizes[largest] -= 1;
        sizes[empty] = 1;
        centroids.row_mut(empty).copy_from_slice(points.row(far));
    }
    Ok(())
}

/// Unclamped concentration `Σ‖v − c‖ / (Z·ln(Z + ε))` of one cluster.
pub fn concentration(members: &[&[f32]], centroid: &[f32], eps: f64) -> Result<f64> {
    let z = members.len();
    if z == 0 {
        return Err(Error::Contract("concentration of an empty cluster".into()));
    }
    let spread: f64 = members
        .iter()
        .map(|v| {
            v.iter()
                .zip(centroid)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(spread / (z as f64 * (z as f64 + eps).ln()))
}

/// Clamps each value into `[0.01·mean, 10·mean]`. A non-positive mean (every
/// cluster collapsed onto its centroid) leaves no scale to clamp against, so
/// every entry falls back to `fallback`.
pub fn clamp_concentrations(raw: &[f64], fallback: f64) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        log::warn!("all clusters have zero spread; using concentration {fallback}");
        return vec![fallback; raw.len()];
    }
    raw.iter().map(|&p| p.clamp(0.01 * mean, 10.0 * mean)).collect()
}

pub const FALLBACK_CONCENTRATION: f64 = 0.1;

/// Cluster centroids with their concentrations and the pseudo-label of every
/// training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub centroids: Tensor<f32>,
    pub phi: Vec<f32>,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    pub epoch: u32,
}

impl PrototypeBank {
    pub fn build<R: Rng + ?Sized>(
        embeddings: &Tensor<f32>,
        cfg: &ProtoConfig,
        epoch: u32,
        rng: &mut R,
    ) -> Result<Self> {
        let km = kmeans(embeddings, cfg.num_clusters, cfg.max_iters, cfg.tol, rng)?;
        let mut members: Vec<Vec<&[f32]>> = vec![Vec::new(); cfg.num_clusters];
        for (i, &k) in km.assignments.iter().enumerate() {
            members[k].push(embeddings.row(i));
        }
        let raw = members
            .iter()
            .enumerate()
            .map(|(k, mem)| concentration(mem, km.centroids.row(k), cfg.eps))
            .collect::<Result<Vec<_>>>()?;
        let phi = clamp_concentrations(&raw, FALLBACK_CONCENTRATION)
            .into_iter()
            .map(|p| p as f32)
            .collect();
        log::debug!(
            "clustered {} embeddings into {} prototypes in {} iterations",
            embeddings.rows(),
            cfg.num_clusters,
            km.iterations
        );
        Ok(Self {
            centroids: km.centroids,
            phi,
            assignments: km.assignments,
            sizes: km.sizes,
            epoch,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u32(self.epoch);
        w.u32(self.centroids.rows() as u32);
        w.u32(self.centroids.cols() as u32);
        w.f32s(self.centroids.data());
        w.f32s(&self.phi);
        w.u32(self.assignments.len() as u32);
        for &a in &self.assignments {
            w.u32(a as u32);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let epoch = r.u32()?;
        let m = r.u32()? as usize;
        let d = r.u32()? as usize;
        let centroids = Tensor::new(vec![m, d], r.f32s(m * d)?)?;
        let phi = r.f32s(m)?;
        let n = r.u32()? as usize;
        let assignments = (0..n).map(|_| r.u32().map(|a| a as usize)).collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = assignments.iter().find(|&&a| a >= m) {
            return Err(Error::Checkpoint(format!("assignment {bad} out of {m} clusters")));
        }
        let mut sizes = vec![0; m];
        for &a in &assignments {
            sizes[a] += 1;
        }
        Ok(Self {
            centroids,
            phi,
            assignments,
            sizes,
            epoch,
        })
    }
}

/// `r` clusters drawn uniformly with replacement from all clusters except `own`.
pub fn sample_negatives<R: Rng + ?Sized>(own: usize, m: usize, r: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m < 2 {
        return Err(Error::Contract("prototype negatives need at least two clusters".into()));
    }
    Ok((0..r)
        .map(|_| {
            let k = rng.random_range(0..m - 1);
            if k >= own {
                k + 1
            } else {
                k
            }
        })
        .collect())
}

/// Mean over the batch of the prototype term with explicit negatives.
pub fn protonce_with_negatives<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    bank: &PrototypeBank,
    labels: &[usize],
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let n = tape.value(queries).rows();
    let m = bank.num_clusters();
    if m < 2 {
        return Err(Error::Contract("prototype term needs at least two clusters".into()));
    }
    if labels.len() != n || negatives.len() != n {
        return Err(Error::shape(
            "protonce",
            format!("{n} queries, {} labels, {} negative lists", labels.len(), negatives.len()),
        ));
    }
    let width = 1 + negatives.first().map_or(0, Vec::len);
    let mut index = Vec::with_capacity(n * width);
    for (i, (&s, negs)) in labels.iter().zip(negatives).enumerate() {
        if negs.len() + 1 != width {
            return Err(Error::shape("protonce", format!("row {i} has {} negatives", negs.len())));
        }
        if s >= m || negs.contains(&s) {
            return Err(Error::Contract(format!("row {i}: invalid pseudo-label or negative set")));
        }
        index.push(s);
        index.extend_from_slice(negs);
    }
    let scale = index.iter().map(|&k| T::from_f64(1.0 / bank.phi[k] as f64)).collect();
    let logits = tape.gather_dots(queries, bank.centroids.cast(), index, scale, width)?;
    let mask = vec![true; n * width];
    let mut weights = vec![T::ZERO; n * width];
    for i in 0..n {
        weights[i * width] = T::ONE;
    }
    tape.contrastive_nll(logits, &mask, &weights)
}

/// Mean prototype term over the batch, drawing `r` negatives per query.
pub fn protonce_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    queries: Var,
    bank: &PrototypeBank,
    labels: &[usize],
    r: usize,
    rng: &mut R,
) -> Result<Var> {
    let negatives = labels
        .iter()
        .map(|&s| sample_negatives(s, bank.num_clusters(), r, rng))
        .collect::<Result<Vec<_>>>()?;
    protonce_with_negatives(tape, queries, bank, labels, &negatives)
}

/// Momentum contrast plus `α` times the mean prototype term.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: &Tensor<T>,
    queue: &Tensor<T>,
    bank: &PrototypeBank,
    labels: &[usize],
    negatives: &[Vec<usize>],
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let moco = moco_loss(tape, queries, keys, queue, cfg.tau)?;
    let proto = protonce_with_negatives(tape, queries, bank, labels, negatives)?;
    let weighted = tape.scale(proto, T::from_f64(cfg.alpha));
    Ok((tape.add(moco, weighted)?, proto))
}
