//! Quality-measure-function calibration: the seven-feature extractor,
//! max-min SNR normalization, and logistic-regression training.
//!
//! The calibrated output is the raw log-odds `w . f + b` (not squashed);
//! the sigmoid is monotone, so detection metrics are unaffected and fusion
//! keeps unbounded score resolution.

use crate::embed::{magnitude, EmbeddingSet, MetadataMap};
use crate::error::{Error, Result};
use crate::store::Trial;

/// The fixed feature vector, in order: log enroll duration, log test
/// duration, enroll embedding magnitude, test embedding magnitude,
/// normalized enroll SNR, normalized test SNR, AS-Norm score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmfFeatures(pub [f64; 7]);

/// Trained calibrator plus the SNR normalization range it was fit with.
#[derive(Debug, Clone, PartialEq)]
pub struct QmfModel {
    pub weights: [f64; 7],
    pub bias: f64,
    pub snr_min: f64,
    pub snr_max: f64,
}

fn validate_snr_range(snr_min: f64, snr_max: f64) -> Result<()> {
    if snr_min.is_nan() || snr_max.is_nan() || snr_max <= snr_min {
        return Err(Error::invalid(format!(
            "snr range degenerate: max {snr_max} <= min {snr_min}"
        )));
    }
    Ok(())
}

impl QmfModel {
    pub fn new(weights: [f64; 7], bias: f64, snr_min: f64, snr_max: f64) -> Result<Self> {
        validate_snr_range(snr_min, snr_max)?;
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(QmfModel {
            weights,
            bias,
            snr_min,
            snr_max,
        })
    }
}

/// Exact min and max SNR over the calibration training utterances.
pub fn fit_snr_range<I: IntoIterator<Item = f64>>(snrs: I) -> Result<(f64, f64)> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for s in snrs {
        any = true;
        min = min.min(s);
        max = max.max(s);
    }
    if !any {
        return Err(Error::invalid("snr range needs at least one utterance"));
    }
    validate_snr_range(min, max)?;
    Ok((min, max))
}

/// SNR values of the utterances referenced by `trials` (each id once).
pub fn trial_snrs(trials: &[Trial], meta: &MetadataMap) -> Result<Vec<f64>> {
    let mut seen = std::collections::BTreeSet::new();
    for t in trials {
        for id in [&t.enroll, &t.test] {
            if seen.insert(id.clone()) && !meta.contains_key(id) {
                return Err(Error::invalid(format!("missing metadata for utterance `{id}`")));
            }
        }
    }
    Ok(seen.iter().map(|id| meta[id].snr_db).collect())
}

/// Extract the seven quality features for one trial.
///
/// Durations are natural-log transformed, optionally capped at
/// `duration_cap` seconds first (long evaluation audio is truncated in the
/// cross-domain setup). Embedding magnitudes come from the raw, stored
/// vectors. Only the SNR features get max-min normalization, clamped to
/// `[0, 1]`.
pub fn extract_features(
    trial: &Trial,
    emb: &EmbeddingSet,
    meta: &MetadataMap,
    asnorm_score: f64,
    snr_range: (f64, f64),
    duration_cap: Option<f64>,
) -> Result<QmfFeatures> {
    let (snr_min, snr_max) = snr_range;
    validate_snr_range(snr_min, snr_max)?;
    let lookup = |id: &str| -> Result<(&crate::embed::UtteranceMetadata, &[f64])> {
        let m = meta
            .get(id)
            .ok_or_else(|| Error::invalid(format!("missing metadata for utterance `{id}`")))?;
        let row = emb
            .get(id)
            .ok_or_else(|| Error::UnknownUtterance(id.to_string()))?;
        Ok((m, row))
    };
    let (enroll_meta, enroll_row) = lookup(&trial.enroll)?;
    let (test_meta, test_row) = lookup(&trial.test)?;

    let log_dur = |d: f64| match duration_cap {
        Some(cap) => d.min(cap).ln(),
        None => d.ln(),
    };
    let norm_snr = |s: f64| ((s - snr_min) / (snr_max - snr_min)).clamp(0.0, 1.0);

    Ok(QmfFeatures([
        log_dur(enroll_meta.duration_s),
        log_dur(test_meta.duration_s),
        magnitude(enroll_row),
        magnitude(test_row),
        norm_snr(enroll_meta.snr_db),
        norm_snr(test_meta.snr_db),
        asnorm_score,
    ]))
}

/// Calibrated score: the log-odds `w . f + b`.
pub fn apply_qmf(model: &QmfModel, features: &QmfFeatures) -> f64 {
    model
        .weights
        .iter()
        .zip(&features.0)
        .map(|(w, f)| w * f)
        .sum::<f64>()
        + model.bias
}

pub fn apply_qmf_batch(model: &QmfModel, features: &[QmfFeatures]) -> Vec<f64> {
    features.iter().map(|f| apply_qmf(model, f)).collect()
}

/// Per-iteration training record.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Mean binary cross-entropy at the start of each iteration, plus a
    /// final entry after the last update.
    pub losses: Vec<f64>,
    pub iterations: usize,
}

const LR: f64 = 0.1;
const MAX_ITERS: usize = 10_000;
const GRAD_TOL: f64 = 1e-7;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable `ln(1 + e^z) - y*z`.
fn bce_term(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

/// Fit the calibrator by full-batch gradient descent on the mean binary
/// cross-entropy (learning rate 0.1, at most 10000 iterations, stop when the
/// gradient infinity-norm falls below 1e-7). Features are standardized to
/// zero mean and unit variance internally; the affine map is folded back into
/// the returned weights and bias.
pub fn train_qmf(
    features: &[QmfFeatures],
    targets: &[bool],
    snr_range: (f64, f64),
) -> Result<QmfModel> {
    train_qmf_traced(features, targets, snr_range).map(|(model, _)| model)
}

pub fn train_qmf_traced(
    features: &[QmfFeatures],
    targets: &[bool],
    snr_range: (f64, f64),
) -> Result<(QmfModel, TrainTrace)> {
    let n = features.len();
    if n == 0 || n != targets.len() {
        return Err(Error::invalid(
            "training needs matching, nonempty features and labels",
        ));
    }
    if targets.iter().all(|&y| y) || targets.iter().all(|&y| !y) {
        return Err(Error::invalid(
            "training needs both target and nontarget trials",
        ));
    }
    for f in features {
        if f.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
    }

    // Standardize each feature. A constant column carries no information and
    // trains to weight zero (unit-norm embedding stores legitimately make the
    // magnitude features constant); a design matrix with every column
    // constant is a broken pipeline and an error.
    let nf = n as f64;
    let mut mean = [0.0f64; 7];
    for f in features {
        for (m, x) in mean.iter_mut().zip(&f.0) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut std = [0.0f64; 7];
    for f in features {
        for j in 0..7 {
            let d = f.0[j] - mean[j];
            std[j] += d * d;
        }
    }
    // The tolerance sits far below any informative feature's spread but
    // above float32 storage jitter (unit-norm embeddings read back from disk
    // have magnitudes of 1 +/- ~1e-7, which must not be fit as signal).
    let mut constant = [false; 7];
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / nf).sqrt();
        constant[j] = *s < 1e-6 * (1.0 + mean[j].abs());
    }
    if constant.iter().all(|&c| c) {
        return Err(Error::invalid(
            "all features are constant across training trials",
        ));
    }
    let standardized: Vec<[f64; 7]> = features
        .iter()
        .map(|f| {
            let mut x = [0.0; 7];
            for j in 0..7 {
                x[j] = if constant[j] {
                    0.0
                } else {
                    (f.0[j] - mean[j]) / std[j]
                };
            }
            x
        })
        .collect();
    let y: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();

    let mut w = [0.0f64; 7];
    let mut b = 0.0f64;
    let mut losses = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        let mut loss = 0.0;
        let mut grad_w = [0.0f64; 7];
        let mut grad_b = 0.0;
        for (x, &yi) in standardized.iter().zip(&y) {
            let z = w.iter().zip(x).map(|(wj, xj)| wj * xj).sum::<f64>() + b;
            loss += bce_term(z, yi);
            let err = sigmoid(z) - yi;
            for (g, xj) in grad_w.iter_mut().zip(x) {
                *g += err * xj;
            }
            grad_b += err;
        }
        loss /= nf;
        grad_w.iter_mut().for_each(|g| *g /= nf);
        grad_b /= nf;
        losses.push(loss);

        let grad_norm = grad_w
            .iter()
            .fold(grad_b.abs(), |acc, g| acc.max(g.abs()));
        if grad_norm < GRAD_TOL {
            break;
        }
        for (wj, g) in w.iter_mut().zip(&grad_w) {
            *wj -= LR * g;
        }
        b -= LR * grad_b;
        iterations += 1;
    }
    let final_loss = {
        let mut loss = 0.0;
        for (x, &yi) in standardized.iter().zip(&y) {
            let z = w.iter().zip(x).map(|(wj, xj)| wj * xj).sum::<f64>() + b;
            loss += bce_term(z, yi);
        }
        loss / nf
    };
    losses.push(final_loss);

    // Fold the standardization back: w.(x-mean)/std + b.
    let mut weights = [0.0f64; 7];
    let mut bias = b;
    for j in 0..7 {
        if constant[j] {
            weights[j] = 0.0;
        } else {
            weights[j] = w[j] / std[j];
            bias -= w[j] * mean[j] / std[j];
        }
    }
    let model = QmfModel::new(weights, bias, snr_range.0, snr_range.1)?;
    Ok((
        model,
        TrainTrace {
            losses,
            iterations,
        },
    ))
}
