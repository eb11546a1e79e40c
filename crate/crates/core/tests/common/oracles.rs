//! Naive double-loop reference losses in f64, written directly from the
//! per-sample definitions with no shared code from the crate.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `[rows][dim]` view.
pub type Rows = Vec<Vec<f64>>;

pub fn simclr(a: &Rows, b: &Rows, tau: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (dot(&a[i], &b[i]) / tau).exp();
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (dot(&a[i], &a[j]) / tau).exp();
            }
            denom += (dot(&a[i], &b[j]) / tau).exp();
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

pub fn supcon(a: &Rows, b: &Rows, labels: &[usize], tau: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (dot(&a[i], &a[j]) / tau).exp();
            }
            denom += (dot(&a[i], &b[j]) / tau).exp();
        }
        let same = labels.iter().filter(|&&l| l == labels[i]).count();
        let coef = 1.0 / (2 * same - 1) as f64;
        let mut term = 0.0;
        for j in 0..n {
            if labels[j] != labels[i] {
                continue;
            }
            if j != i {
                term += ((dot(&a[i], &a[j]) / tau).exp() / denom).ln();
            }
            term += ((dot(&a[i], &b[j]) / tau).exp() / denom).ln();
        }
        total += -coef * term;
    }
    total / n as f64
}

pub fn moco(q: &Rows, k: &Rows, queue: &Rows, tau: f64) -> f64 {
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (dot(&q[i], &k[i]) / tau).exp();
        let mut denom = pos;
        for neg in queue {
            denom += (dot(&q[i], neg) / tau).exp();
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

pub fn protonce(q: &Rows, centroids: &Rows, phi: &[f64], labels: &[usize], negatives: &[Vec<usize>]) -> f64 {
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n {
        let s = labels[i];
        let pos = (dot(&q[i], &centroids[s]) / phi[s]).exp();
        let mut denom = pos;
        for &j in &negatives[i] {
            denom += (dot(&q[i], &centroids[j]) / phi[j]).exp();
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

pub fn joint(
    q: &Rows,
    k: &Rows,
    queue: &Rows,
    centroids: &Rows,
    phi: &[f64],
    labels: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
    alpha: f64,
) -> f64 {
    moco(q, k, queue, tau) + alpha * protonce(q, centroids, phi, labels, negatives)
}

pub fn semi(q: &Rows, k: &Rows, labels: &[Option<usize>], queue: &Rows, tau: f64, lambda: f64) -> f64 {
    let idx: Vec<usize> = (0..q.len()).filter(|&i| labels[i].is_some()).collect();
    let sup = if idx.is_empty() {
        0.0
    } else {
        let qa: Rows = idx.iter().map(|&i| q[i].clone()).collect();
        let kb: Rows = idx.iter().map(|&i| k[i].clone()).collect();
        let l: Vec<usize> = idx.iter().map(|&i| labels[i].unwrap()).collect();
        supcon(&qa, &kb, &l, tau)
    };
    sup + lambda * moco(q, k, queue, tau)
}

/// Exhaustive EER and minDCF: every threshold between sorted scores plus
/// both ends, no incremental bookkeeping.
pub fn sweep_metrics(scores: &[f64], targets: &[bool], p: f64, c_miss: f64, c_fa: f64) -> (f64, f64) {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    for w in s.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(f64::INFINITY);
    let nt = targets.iter().filter(|&&t| t).count() as f64;
    let nn = targets.len() as f64 - nt;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let mut fa = 0.0;
            let mut miss = 0.0;
            for (sc, &t) in scores.iter().zip(targets) {
                let accept = *sc > th;
                if t && !accept {
                    miss += 1.0;
                }
                if !t && accept {
                    fa += 1.0;
                }
            }
            (fa / nn, miss / nt)
        })
        .collect();
    // FAR falls and FRR rises with the threshold; find the crossing.
    let mut eer = f64::NAN;
    for w in 0..rates.len() {
        let (far, frr) = rates[w];
        if frr >= far {
            if frr == far || w == 0 {
                eer = far;
            } else {
                let (far0, frr0) = rates[w - 1];
                let d0 = far0 - frr0;
                let d1 = far - frr;
                let a = d0 / (d0 - d1);
                eer = far0 + a * (far - far0);
            }
            break;
        }
    }
    let norm = (c_miss * p).min(c_fa * (1.0 - p));
    let dcf = rates
        .iter()
        .map(|&(far, frr)| (c_miss * p * frr + c_fa * (1.0 - p) * far) / norm)
        .fold(f64::INFINITY, f64::min);
    (eer, dcf)
}
