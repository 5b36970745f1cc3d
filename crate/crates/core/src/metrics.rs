//! Detection metrics: ROC-style sweep, equal error rate, minimum normalized
//! detection cost, plus normalized mutual information for comparing
//! partitions.
//!
//! The sweep places one operating point at every distinct score (decision
//! rule: accept iff `score >= threshold`) plus a final reject-all point, so
//! false-alarm rate is non-increasing and miss rate non-decreasing along the
//! curve. Only the rank order of scores matters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::store::ScoredTrial;

/// One DET operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    /// Fraction of nontarget trials accepted.
    pub fa: f64,
    /// Fraction of target trials rejected.
    pub miss: f64,
}

/// Ordered sequence of operating points with strictly increasing thresholds.
#[derive(Debug, Clone)]
pub struct DetCurve {
    points: Vec<DetPoint>,
}

impl DetCurve {
    pub fn points(&self) -> &[DetPoint] {
        &self.points
    }
}

fn split_scores(trials: &[ScoredTrial]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in trials {
        let label = t.label.ok_or_else(|| {
            Error::invalid(format!("trial {} {} has no label", t.enroll, t.test))
        })?;
        if !t.score.is_finite() {
            return Err(Error::invalid(format!(
                "trial {} {} has non-finite score",
                t.enroll, t.test
            )));
        }
        if label.is_target() {
            targets.push(t.score);
        } else {
            nontargets.push(t.score);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::invalid(
            "metrics need at least one target and one nontarget trial",
        ));
    }
    Ok((targets, nontargets))
}

/// Sweep all distinct scores as thresholds.
pub fn det_sweep(trials: &[ScoredTrial]) -> Result<DetCurve> {
    let (targets, nontargets) = split_scores(trials)?;
    Ok(sweep(&targets, &nontargets))
}

fn sweep(targets: &[f64], nontargets: &[f64]) -> DetCurve {
    let mut tgt = targets.to_vec();
    let mut non = nontargets.to_vec();
    tgt.sort_unstable_by(f64::total_cmp);
    non.sort_unstable_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = tgt.iter().chain(non.iter()).copied().collect();
    thresholds.sort_unstable_by(f64::total_cmp);
    thresholds.dedup();

    let n_tgt = tgt.len() as f64;
    let n_non = non.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    // Walk both sorted score lists once across the ascending thresholds.
    let (mut ti, mut ni) = (0usize, 0usize);
    for &th in &thresholds {
        while ti < tgt.len() && tgt[ti] < th {
            ti += 1;
        }
        while ni < non.len() && non[ni] < th {
            ni += 1;
        }
        points.push(DetPoint {
            threshold: th,
            fa: (non.len() - ni) as f64 / n_non,
            miss: ti as f64 / n_tgt,
        });
    }
    // Reject-all operating point above the largest score.
    points.push(DetPoint {
        threshold: f64::INFINITY,
        fa: 0.0,
        miss: 1.0,
    });
    DetCurve { points }
}

/// Equal error rate in `[0, 1]`: the rate where the false-alarm and miss
/// curves cross, linearly interpolated between the adjacent sweep points.
pub fn eer(trials: &[ScoredTrial]) -> Result<f64> {
    Ok(eer_from_curve(&det_sweep(trials)?))
}

pub fn eer_from_curve(curve: &DetCurve) -> f64 {
    let pts = curve.points();
    // diff = miss - fa starts at -1 (accept everything) and ends at +1
    // (reject everything), so a sign change always exists.
    let mut prev = pts[0];
    for &pt in pts {
        let diff = pt.miss - pt.fa;
        if diff == 0.0 {
            return pt.fa;
        }
        if diff > 0.0 {
            let prev_gap = prev.fa - prev.miss; // > 0 here
            let step = prev_gap + (pt.miss - pt.fa);
            let lambda = prev_gap / step;
            return prev.fa + lambda * (pt.fa - prev.fa);
        }
        prev = pt;
    }
    // Unreachable for valid curves; the reject-all point has diff = +1.
    1.0
}

/// Minimum normalized detection cost at target prior `p_target`.
///
/// The raw cost `c_miss * p * miss + c_fa * (1-p) * fa` is minimized over the
/// sweep and normalized by the better trivial system,
/// `min(c_miss * p, c_fa * (1-p))`.
pub fn min_dcf_with_costs(
    trials: &[ScoredTrial],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::invalid(format!(
            "p_target must lie in (0, 1), got {p_target}"
        )));
    }
    if c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::invalid("detection costs must be positive"));
    }
    let curve = det_sweep(trials)?;
    let min_cost = curve
        .points()
        .iter()
        .map(|pt| c_miss * p_target * pt.miss + c_fa * (1.0 - p_target) * pt.fa)
        .fold(f64::INFINITY, f64::min);
    Ok(min_cost / (c_miss * p_target).min(c_fa * (1.0 - p_target)))
}

/// `min_dcf_with_costs` with unit miss and false-alarm costs.
pub fn min_dcf(trials: &[ScoredTrial], p_target: f64) -> Result<f64> {
    min_dcf_with_costs(trials, p_target, 1.0, 1.0)
}

/// Normalized mutual information between two labelings of the same items,
/// `2 I(X;Y) / (H(X) + H(Y))`; 1.0 when both labelings are trivial.
pub fn nmi<A: Ord + Clone, B: Ord + Clone>(pairs: &[(A, B)]) -> f64 {
    if pairs.is_empty() {
        return 1.0;
    }
    let n = pairs.len() as f64;
    let mut count_a: BTreeMap<&A, usize> = BTreeMap::new();
    let mut count_b: BTreeMap<&B, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    for (a, b) in pairs {
        *count_a.entry(a).or_insert(0) += 1;
        *count_b.entry(b).or_insert(0) += 1;
        *joint.entry((a, b)).or_insert(0) += 1;
    }
    fn entropy<K>(counts: &BTreeMap<K, usize>, n: f64) -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }
    let h_a = entropy(&count_a, n);
    let h_b = entropy(&count_b, n);
    if h_a + h_b == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for ((a, b), &c) in &joint {
        let p_ab = c as f64 / n;
        let p_a = count_a[a] as f64 / n;
        let p_b = count_b[b] as f64 / n;
        mi += p_ab * (p_ab / (p_a * p_b)).ln();
    }
    (2.0 * mi / (h_a + h_b)).clamp(0.0, 1.0)
}
