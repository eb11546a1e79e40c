use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || !(self.c_miss > 0.0) || !(self.c_fa > 0.0) {
            return Err(Error::Config(format!(
                "need 0 < p_target < 1 and positive costs, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One threshold with its false-acceptance and false-rejection rates.
/// A trial is accepted when its score is above the threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at −∞, every midpoint between adjacent distinct scores,
/// and +∞, in increasing threshold order.
pub fn operating_points(scores: &[f64], targets: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != targets.len() {
        return Err(Error::Eval(format!("{} scores for {} trials", scores.len(), targets.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Eval(format!("score of trial {i} is not finite")));
    }
    let n_t = targets.iter().filter(|&&t| t).count();
    let n_n = targets.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Contract(format!(
            "need targets and nontargets, got {n_t} and {n_n}"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (nt, nn) = (n_t as f64, n_n as f64);
    let mut points = vec![OperatingPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    }];
    // Targets and nontargets at or below the current threshold.
    let (mut t_below, mut n_below) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if targets[order[k]] {
                t_below += 1;
            } else {
                n_below += 1;
            }
            k += 1;
        }
        let threshold = if k < order.len() {
            0.5 * (s + scores[order[k]])
        } else {
            f64::INFINITY
        };
        points.push(OperatingPoint {
            threshold,
            far: (n_n - n_below) as f64 / nn,
            frr: t_below as f64 / nt,
        });
    }
    Ok(points)
}

/// Equal error rate and its threshold.
///
/// Where no operating point has `FAR = FRR`, both rates are interpolated
/// linearly between the two points straddling the crossing.
pub fn eer(scores: &[f64], targets: &[bool]) -> Result<(f64, f64)> {
    Ok(eer_from_points(&operating_points(scores, targets)?))
}

pub(crate) fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("the +inf operating point has FRR = 1 >= FAR = 0");
    let p1 = points[k];
    if p1.frr == p1.far || k == 0 {
        return (p1.far, p1.threshold);
    }
    let p0 = points[k - 1];
    let d0 = p0.far - p0.frr;
    let d1 = p1.far - p1.frr;
    let a = d0 / (d0 - d1);
    let rate = p0.far + a * (p1.far - p0.far);
    let threshold = match (p0.threshold.is_finite(), p1.threshold.is_finite()) {
        (true, true) => p0.threshold + a * (p1.threshold - p0.threshold),
        (true, false) => p0.threshold,
        (false, _) => p1.threshold,
    };
    (rate, threshold)
}

/// Minimum normalized detection cost and the threshold achieving it.
pub fn min_dcf(scores: &[f64], targets: &[bool], cfg: &DcfConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    Ok(min_dcf_from_points(&operating_points(scores, targets)?, cfg))
}

pub(crate) fn min_dcf_from_points(points: &[OperatingPoint], cfg: &DcfConfig) -> (f64, f64) {
    let norm = (cfg.c_miss * cfg.p_target).min(cfg.c_fa * (1.0 - cfg.p_target));
    let mut best = (f64::INFINITY, f64::NAN);
    for p in points {
        let cost = (cfg.c_miss * cfg.p_target * p.frr + cfg.c_fa * (1.0 - cfg.p_target) * p.far) / norm;
        if cost < best.0 {
            best = (cost, p.threshold);
        }
    }
    best
}
