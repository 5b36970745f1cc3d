//! Sub-center angular-margin purification: train a sub-center ArcFace
//! classifier on frozen embeddings, then drop classes whose members spread
//! over several sub-centers.
//!
//! Only the classifier weights train (the embedding extractor is out of
//! scope); a pure class concentrates on one sub-center, a class that merged
//! several true speakers splits across sub-centers and is removed.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::cluster::Partition;
use crate::embed::{l2_normalize, EmbeddingSet};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct SubCenterConfig {
    /// Sub-centers per class, at least 2.
    pub sub_centers: usize,
    /// Additive angular margin (radians) applied to the true class.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays by 10x after two thirds of the epochs.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SubCenterConfig {
    fn default() -> Self {
        SubCenterConfig {
            sub_centers: 3,
            margin: 0.2,
            scale: 32.0,
            epochs: 15,
            batch_size: 256,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Trained classifier: `classes x sub_centers` unit weight vectors.
#[derive(Debug, Clone)]
pub struct SubCenterModel {
    class_labels: Vec<u32>,
    k: usize,
    dim: usize,
    margin: f64,
    scale: f64,
    weights: Vec<f64>, // (class, sub-center) major, rows of length dim
}

impl SubCenterModel {
    pub fn class_labels(&self) -> &[u32] {
        &self.class_labels
    }

    pub fn sub_centers(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn sub_center(&self, class_idx: usize, k: usize) -> &[f64] {
        let row = class_idx * self.k + k;
        &self.weights[row * self.dim..(row + 1) * self.dim]
    }

    /// Index of the sub-center of `class_idx` most similar to `unit_row`,
    /// ties to the lowest index.
    pub fn chosen_sub_center(&self, class_idx: usize, unit_row: &[f64]) -> usize {
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 0..self.k {
            let cos = dot(unit_row, self.sub_center(class_idx, k));
            if cos > best.1 {
                best = (k, cos);
            }
        }
        best.0
    }

    /// `(class index, max-sub-center cosine)` with the highest cosine.
    pub fn classify(&self, unit_row: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..self.class_labels.len() {
            let k = self.chosen_sub_center(c, unit_row);
            let cos = dot(unit_row, self.sub_center(c, k));
            if cos > best.1 {
                best = (c, cos);
            }
        }
        best
    }
}

/// Per-class sub-center concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct PurityRow {
    pub class: u32,
    pub modal_sub_center: usize,
    /// Fraction of members whose argmax sub-center is the modal one; always
    /// at least `1/K`.
    pub dominant_fraction: f64,
    pub member_count: usize,
}

#[derive(Debug, Clone)]
pub struct PurityReport {
    pub sub_centers: usize,
    pub rows: Vec<PurityRow>,
}

impl PurityReport {
    pub fn row_for(&self, class: u32) -> Option<&PurityRow> {
        self.rows.iter().find(|r| r.class == class)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const COS_CLAMP: f64 = 1.0 - 1e-6;
const MIN_SIN: f64 = 1e-8;

/// Per-sample forward pass and weight-gradient coefficients.
///
/// Returns the cross-entropy loss and, per class, the selected sub-center
/// and the coefficient `g` such that `dL/dw = g * x`.
#[allow(clippy::too_many_arguments)]
fn sample_forward(
    x: &[f64],
    label_idx: usize,
    weights: &[f64],
    n_classes: usize,
    k: usize,
    dim: usize,
    margin: f64,
    scale: f64,
) -> (f64, Vec<(usize, f64)>) {
    let mut chosen = vec![0usize; n_classes];
    let mut cosines = vec![0.0f64; n_classes];
    for c in 0..n_classes {
        let mut best = (0usize, f64::NEG_INFINITY);
        for kk in 0..k {
            let row = (c * k + kk) * dim;
            let cos = dot(x, &weights[row..row + dim]);
            if cos > best.1 {
                best = (kk, cos);
            }
        }
        chosen[c] = best.0;
        cosines[c] = best.1;
    }

    // Additive angular margin on the true class's selected sub-center.
    // With a zero margin the logit is the plain cosine.
    let (modified, dmod) = if margin == 0.0 {
        (cosines[label_idx], 1.0)
    } else {
        let a = cosines[label_idx].clamp(-COS_CLAMP, COS_CLAMP);
        let theta = a.acos();
        (
            (theta + margin).cos(),
            (theta + margin).sin() / theta.sin().max(MIN_SIN),
        )
    };

    let mut logits: Vec<f64> = cosines.iter().map(|&c| scale * c).collect();
    logits[label_idx] = scale * modified;
    let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for l in logits.iter() {
        denom += (l - max_logit).exp();
    }
    let loss = -(logits[label_idx] - max_logit) + denom.ln();

    let coefs: Vec<(usize, f64)> = (0..n_classes)
        .map(|c| {
            let p = (logits[c] - max_logit).exp() / denom;
            let mut g = p - if c == label_idx { 1.0 } else { 0.0 };
            g *= scale;
            if c == label_idx {
                g *= dmod;
            }
            (chosen[c], g)
        })
        .collect();
    (loss, coefs)
}

/// Train the classifier by seeded mini-batch gradient descent; weights are
/// re-unit-normalized after every step. Returns the model and the mean loss
/// per epoch. Deterministic for a fixed seed.
pub fn train_subcenter(
    emb: &EmbeddingSet,
    labels: &Partition,
    config: &SubCenterConfig,
) -> Result<(SubCenterModel, Vec<f64>)> {
    if config.sub_centers < 2 {
        return Err(Error::invalid("sub_centers must be at least 2"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    if !(config.margin >= 0.0 && config.scale > 0.0 && config.learning_rate > 0.0) {
        return Err(Error::invalid("margin, scale, learning rate must be positive"));
    }
    let class_labels: Vec<u32> = labels.labels().collect();
    if class_labels.len() < 2 {
        return Err(Error::invalid("training needs at least 2 classes"));
    }
    let class_idx: BTreeMap<u32, usize> = class_labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();

    // (normalized row, class index), in deterministic label/member order.
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::with_capacity(labels.total_assigned());
    for (&label, members) in labels.clusters() {
        for id in members {
            let row = emb
                .get(id)
                .ok_or_else(|| Error::UnknownUtterance(id.clone()))?;
            let unit = l2_normalize(row)
                .map_err(|_| Error::degenerate_ctx(format!("utterance `{id}`")))?;
            samples.push((unit, class_idx[&label]));
        }
    }

    let (n_classes, k, dim) = (class_labels.len(), config.sub_centers, emb.dim());
    let mut rng = Rng::new(config.seed);

    // Sub-center 0 starts at the class mean; the rest start on members
    // farthest (in angle) from the centers chosen so far, so a class made of
    // several true speakers seeds one sub-center per mode from the first
    // step. Classes with too few members pad with random directions.
    let mut weights = vec![0.0f64; n_classes * k * dim];
    {
        let mut class_members: Vec<Vec<&[f64]>> = vec![Vec::new(); n_classes];
        for (x, ci) in &samples {
            class_members[*ci].push(x.as_slice());
        }
        for (ci, members) in class_members.iter().enumerate() {
            let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(k);
            let mean = crate::embed::centroid(members.iter().copied())
                .unwrap_or_else(|_| members[0].to_vec());
            chosen.push(mean);
            while chosen.len() < k {
                let next = members
                    .iter()
                    .map(|m| {
                        let closeness = chosen
                            .iter()
                            .map(|c| dot(m, c))
                            .fold(f64::NEG_INFINITY, f64::max);
                        (closeness, *m)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, m)| m.to_vec());
                match next {
                    Some(m) if chosen.len() < members.len() => chosen.push(m),
                    _ => loop {
                        let v: Vec<f64> = (0..dim).map(|_| rng.gauss()).collect();
                        if let Ok(unit) = l2_normalize(&v) {
                            chosen.push(unit);
                            break;
                        }
                    },
                }
            }
            for (kk, w) in chosen.into_iter().enumerate() {
                let row = ci * k + kk;
                weights[row * dim..(row + 1) * dim].copy_from_slice(&w);
            }
        }
    }

    let decay_epoch = config.epochs * 2 / 3;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0f64; weights.len()];

    for epoch in 0..config.epochs {
        let lr = if epoch >= decay_epoch {
            config.learning_rate * 0.1
        } else {
            config.learning_rate
        };
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<(usize, f64)>)> = batch
                .par_iter()
                .map(|&s| {
                    let (x, y) = &samples[s];
                    sample_forward(x, *y, &weights, n_classes, k, dim, config.margin, config.scale)
                })
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (&s, (loss, coefs)) in batch.iter().zip(&results) {
                loss_sum += loss;
                let (x, _) = &samples[s];
                for (c, &(kk, g)) in coefs.iter().enumerate() {
                    let row = (c * k + kk) * dim;
                    for (gslot, xi) in grad[row..row + dim].iter_mut().zip(x) {
                        *gslot += g * xi;
                    }
                }
            }
            let step = lr / batch.len() as f64;
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            for row in 0..n_classes * k {
                let slice = &mut weights[row * dim..(row + 1) * dim];
                let norm = slice.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    slice.iter_mut().for_each(|x| *x /= norm);
                }
            }
        }
        epoch_losses.push(loss_sum / samples.len() as f64);
    }

    Ok((
        SubCenterModel {
            class_labels,
            k,
            dim,
            margin: config.margin,
            scale: config.scale,
            weights,
        },
        epoch_losses,
    ))
}

/// For every class, the share of members choosing its modal sub-center.
pub fn assignment_report(
    model: &SubCenterModel,
    emb: &EmbeddingSet,
    labels: &Partition,
) -> Result<PurityReport> {
    let class_idx: BTreeMap<u32, usize> = model
        .class_labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut rows = Vec::new();
    for (&label, members) in labels.clusters() {
        let &ci = class_idx
            .get(&label)
            .ok_or_else(|| Error::invalid(format!("class {label} unknown to the model")))?;
        let choices: Vec<usize> = members
            .par_iter()
            .map(|id| {
                let row = emb
                    .get(id)
                    .ok_or_else(|| Error::UnknownUtterance(id.clone()))?;
                let unit = l2_normalize(row)
                    .map_err(|_| Error::degenerate_ctx(format!("utterance `{id}`")))?;
                Ok(model.chosen_sub_center(ci, &unit))
            })
            .collect::<Result<_>>()?;
        let mut counts = vec![0usize; model.k];
        for &c in &choices {
            counts[c] += 1;
        }
        let modal = counts
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        rows.push(PurityRow {
            class: label,
            modal_sub_center: modal,
            dominant_fraction: counts[modal] as f64 / members.len() as f64,
            member_count: members.len(),
        });
    }
    Ok(PurityReport {
        sub_centers: model.k,
        rows,
    })
}

/// Remove classes whose dominant fraction falls below `purity_threshold`;
/// their members become unassigned.
pub fn purge_impure(
    partition: &Partition,
    report: &PurityReport,
    purity_threshold: f64,
) -> Result<Partition> {
    let floor = 1.0 / report.sub_centers as f64;
    if !(purity_threshold > floor && purity_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "purity threshold must lie in (1/{}, 1], got {purity_threshold}",
            report.sub_centers
        )));
    }
    let by_class: BTreeMap<u32, &PurityRow> = report.rows.iter().map(|r| (r.class, r)).collect();
    let mut kept: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for (&label, members) in partition.clusters() {
        let row = by_class
            .get(&label)
            .ok_or_else(|| Error::invalid(format!("purity report misses class {label}")))?;
        if row.dominant_fraction >= purity_threshold {
            kept.insert(label, members.clone());
        }
    }
    Ok(Partition::from_clusters(kept))
}
