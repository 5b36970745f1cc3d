//! Trial scoring, cohort construction, adaptive symmetric score
//! normalization, and score-level fusion.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::embed::{centroid, l2_normalize, unit_cosine, EmbeddingSet, MetadataMap};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::store::{ScoredTrial, Trial};

/// How a normalization cohort was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortSource {
    /// One entry per training speaker: the renormalized mean of the
    /// speaker's normalized utterance embeddings.
    SpeakerMeans,
    /// A seeded random sample of utterance embeddings.
    UtteranceSample,
}

/// Reference embeddings for score normalization, unit-normalized.
#[derive(Debug, Clone)]
pub struct Cohort {
    source: CohortSource,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

impl Cohort {
    pub(crate) fn from_unit_rows(
        source: CohortSource,
        dim: usize,
        ids: Vec<String>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("cohort must be nonempty"));
        }
        debug_assert_eq!(data.len(), ids.len() * dim);
        Ok(Cohort {
            source,
            dim,
            ids,
            data,
        })
    }

    /// Build a cohort from stored embeddings, normalizing every row.
    pub fn from_embeddings(set: &EmbeddingSet, source: CohortSource) -> Result<Self> {
        let unit = set.normalized()?;
        Ok(Cohort {
            source,
            dim: unit.dim(),
            ids: unit.ids().to_vec(),
            data: (0..unit.len()).flat_map(|i| unit.row(i).to_vec()).collect(),
        })
    }

    /// The cohort entries as an embedding set (for persistence).
    pub fn to_embeddings(&self) -> EmbeddingSet {
        EmbeddingSet::from_rows(
            self.dim,
            self.ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.row(i).to_vec())),
        )
        .expect("cohort rows are consistent")
    }

    pub fn source(&self) -> CohortSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// AS-Norm settings.
#[derive(Debug, Clone, Copy)]
pub struct AsNormConfig {
    /// Number of most-similar cohort scores used per side.
    pub top_k: usize,
}

impl Default for AsNormConfig {
    fn default() -> Self {
        AsNormConfig { top_k: 300 }
    }
}

/// Mean and population standard deviation of the top-k cohort scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics over the `top_k` largest entries of `scores`.
pub fn top_k_stats(scores: &[f64], top_k: usize) -> Result<CohortStats> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    if scores.len() < top_k {
        return Err(Error::invalid(format!(
            "cohort produced {} scores but top_k is {top_k}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let top = &sorted[..top_k];
    let mean = top.iter().sum::<f64>() / top_k as f64;
    let var = top.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / top_k as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return Err(Error::invalid("degenerate cohort variance"));
    }
    Ok(CohortStats { mean, std })
}

/// The symmetric z-normalization of one raw score.
pub fn normalize_score(raw: f64, enroll: &CohortStats, test: &CohortStats) -> f64 {
    ((raw - enroll.mean) / enroll.std + (raw - test.mean) / test.std) / 2.0
}

/// Cosine-score every trial (both embeddings length-normalized first).
/// Trial order is preserved.
pub fn score_trials(trials: &[Trial], emb: &EmbeddingSet) -> Result<Vec<ScoredTrial>> {
    let unit_rows = unit_rows_for_trials(trials, emb)?;
    Ok(trials
        .par_iter()
        .map(|t| {
            let e = &unit_rows[&t.enroll];
            let s = &unit_rows[&t.test];
            t.with_score(unit_cosine(e, s))
        })
        .collect())
}

fn unit_rows_for_trials(
    trials: &[Trial],
    emb: &EmbeddingSet,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let ids: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .collect();
    ids.into_iter()
        .map(|id| {
            let row = emb
                .get(id)
                .ok_or_else(|| Error::UnknownUtterance(id.to_string()))?;
            let unit = l2_normalize(row)
                .map_err(|_| Error::degenerate_ctx(format!("utterance `{id}`")))?;
            Ok((id.to_string(), unit))
        })
        .collect()
}

/// Speaker-wise cohort: one renormalized mean embedding per training
/// speaker. Every utterance in `emb` must carry a speaker label in `meta`.
pub fn build_speaker_cohort(emb: &EmbeddingSet, meta: &MetadataMap) -> Result<Cohort> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, id) in emb.ids().iter().enumerate() {
        let speaker = meta
            .get(id)
            .and_then(|m| m.speaker.clone())
            .ok_or_else(|| Error::invalid(format!("utterance `{id}` has no speaker label")))?;
        groups.entry(speaker).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::invalid("cohort must be nonempty"));
    }
    let unit = emb.normalized()?;
    let mut ids = Vec::with_capacity(groups.len());
    let mut data = Vec::with_capacity(groups.len() * emb.dim());
    for (speaker, rows) in groups {
        let mean = centroid(rows.iter().map(|&i| unit.row(i)))
            .map_err(|_| Error::degenerate_ctx(format!("mean of speaker `{speaker}`")))?;
        data.extend_from_slice(&mean);
        ids.push(speaker);
    }
    Cohort::from_unit_rows(CohortSource::SpeakerMeans, emb.dim(), ids, data)
}

/// A seeded uniform sample of `n` distinct utterances, without replacement.
/// Selection order is canonical (sorted by id) and deterministic per seed.
pub fn sample_utterance_cohort(emb: &EmbeddingSet, n: usize, seed: u64) -> Result<Cohort> {
    if n == 0 {
        return Err(Error::invalid("cohort sample size must be at least 1"));
    }
    if n > emb.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} utterances from {}",
            emb.len()
        )));
    }
    let mut order: Vec<usize> = (0..emb.len()).collect();
    order.sort_unstable_by(|&a, &b| emb.ids()[a].cmp(&emb.ids()[b]));
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable_by(|&a, &b| emb.ids()[a].cmp(&emb.ids()[b]));

    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * emb.dim());
    for &i in &chosen {
        let id = &emb.ids()[i];
        let unit = l2_normalize(emb.row(i))
            .map_err(|_| Error::degenerate_ctx(format!("utterance `{id}`")))?;
        data.extend_from_slice(&unit);
        ids.push(id.clone());
    }
    Cohort::from_unit_rows(CohortSource::UtteranceSample, emb.dim(), ids, data)
}

/// Adaptive symmetric score normalization.
///
/// For each trial with raw score `s`, both sides are z-normalized against
/// the mean and population standard deviation of their `top_k` most similar
/// cohort scores and averaged:
/// `s' = ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t) / 2`.
///
/// Cohort statistics are computed once per distinct utterance id (trials
/// share enrollment utterances) against a precomputed normalized matrix.
pub fn as_norm(
    scored: &[ScoredTrial],
    emb: &EmbeddingSet,
    cohort: &Cohort,
    config: &AsNormConfig,
) -> Result<Vec<ScoredTrial>> {
    if config.top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    if cohort.len() < config.top_k {
        return Err(Error::invalid(format!(
            "cohort size {} is smaller than top_k {}",
            cohort.len(),
            config.top_k
        )));
    }
    if cohort.dim() != emb.dim() {
        return Err(Error::DimensionMismatch {
            expected: emb.dim(),
            got: cohort.dim(),
        });
    }

    let ids: BTreeSet<&str> = scored
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .collect();
    let ids: Vec<&str> = ids.into_iter().collect();
    let stats: BTreeMap<&str, CohortStats> = ids
        .par_iter()
        .map(|&id| {
            let row = emb
                .get(id)
                .ok_or_else(|| Error::UnknownUtterance(id.to_string()))?;
            let unit = l2_normalize(row)
                .map_err(|_| Error::degenerate_ctx(format!("utterance `{id}`")))?;
            let scores: Vec<f64> = (0..cohort.len())
                .map(|j| unit_cosine(&unit, cohort.row(j)))
                .collect();
            Ok((id, top_k_stats(&scores, config.top_k)?))
        })
        .collect::<Result<_>>()?;

    Ok(scored
        .iter()
        .map(|t| {
            let e = &stats[t.enroll.as_str()];
            let s = &stats[t.test.as_str()];
            ScoredTrial {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                label: t.label,
                score: normalize_score(t.score, e, s),
            }
        })
        .collect())
}

/// Weighted score-level fusion. All systems must cover the identical trial
/// sequence; weights are applied as given, without renormalization.
pub fn fuse(systems: &[Vec<ScoredTrial>], weights: &[f64]) -> Result<Vec<ScoredTrial>> {
    if systems.is_empty() {
        return Err(Error::invalid("fusion needs at least one system"));
    }
    if systems.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} systems but {} weights",
            systems.len(),
            weights.len()
        )));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid("fusion weights must not all be zero"));
    }
    let first = &systems[0];
    for (k, sys) in systems.iter().enumerate().skip(1) {
        if sys.len() != first.len() {
            return Err(Error::invalid(format!(
                "system {k} has {} trials, expected {}",
                sys.len(),
                first.len()
            )));
        }
        for (a, b) in first.iter().zip(sys) {
            if a.enroll != b.enroll || a.test != b.test {
                return Err(Error::invalid(format!(
                    "trial sets differ: ({} {}) vs ({} {})",
                    a.enroll, a.test, b.enroll, b.test
                )));
            }
        }
    }
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let score = systems
                .iter()
                .zip(weights)
                .map(|(sys, &w)| w * sys[i].score)
                .sum();
            ScoredTrial {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                label: t.label,
                score,
            }
        })
        .collect())
}
