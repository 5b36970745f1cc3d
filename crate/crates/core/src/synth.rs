//! Seeded synthetic corpus generation: planted speakers on the unit sphere
//! with Gaussian perturbations, per-utterance metadata, planted impure
//! classes, and labeled trial lists. Every draw comes from [`crate::rng`],
//! so identical configs produce byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet};

use crate::cluster::Partition;
use crate::embed::{l2_normalize, EmbeddingSet, MetadataMap, UtteranceMetadata};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::store::{Trial, TrialLabel};

/// Half of the angle between the two planted speakers of an impure class
/// (their centroids sit 24 degrees apart: close enough that graph clustering
/// merges them and outlier cleaning keeps both sides, far enough that
/// sub-centers can tell them apart).
const IMPURE_HALF_ANGLE: f64 = 12.0 * std::f64::consts::PI / 180.0;
/// Impure-class lobes use this fraction of the configured noise so each lobe
/// stays tighter than the pair separation.
const IMPURE_NOISE_FACTOR: f64 = 0.35;

const DURATION_RANGE_S: (f64, f64) = (0.5, 30.0);
const SNR_RANGE_DB: (f64, f64) = (0.0, 30.0);

/// Generator settings.
///
/// `noise_sigma` scales the Gaussian perturbation so that its expected
/// Euclidean norm is `noise_sigma` (per-coordinate standard deviation
/// `noise_sigma / sqrt(dim)`); utterances are re-normalized to the unit
/// sphere afterwards.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Number of planted classes. A pure class is one speaker; an impure
    /// class mixes two.
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Fraction of classes planted as two-speaker mixtures.
    pub impure_fraction: f64,
    pub seed: u64,
}

/// A generated corpus with its planted ground truth.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub embeddings: EmbeddingSet,
    /// True (sub-)speaker labels, durations and SNRs per utterance.
    pub metadata: MetadataMap,
    /// Planted class of every utterance (impure classes keep both speakers
    /// under one label).
    pub planted_classes: Partition,
    /// Labels of the classes planted as two-speaker mixtures.
    pub impure_classes: Vec<u32>,
}

fn validate(config: &SynthConfig) -> Result<()> {
    if config.speakers == 0 || config.utts_per_speaker == 0 || config.dim == 0 {
        return Err(Error::invalid("speakers, utterances, dim must be positive"));
    }
    if config.noise_sigma.is_nan() || config.noise_sigma < 0.0 {
        return Err(Error::invalid("noise_sigma must be nonnegative"));
    }
    if !(0.0..=1.0).contains(&config.impure_fraction) {
        return Err(Error::invalid("impure_fraction must lie in [0, 1]"));
    }
    Ok(())
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gauss()).collect();
        if let Ok(unit) = l2_normalize(&v) {
            return unit;
        }
    }
}

/// A unit vector orthogonal to `base` (Gram-Schmidt on a random draw).
fn random_orthogonal(rng: &mut Rng, base: &[f64]) -> Vec<f64> {
    loop {
        let v = random_unit(rng, base.len());
        let proj: f64 = v.iter().zip(base).map(|(a, b)| a * b).sum();
        let residual: Vec<f64> = v.iter().zip(base).map(|(a, b)| a - proj * b).collect();
        if let Ok(unit) = l2_normalize(&residual) {
            return unit;
        }
    }
}

/// Generate embeddings, metadata with true speakers, and the planted class
/// assignment. Deterministic per seed.
pub fn generate_embeddings(config: &SynthConfig) -> Result<SynthCorpus> {
    validate(config)?;
    let mut rng = Rng::new(config.seed);
    let n_impure = (config.speakers as f64 * config.impure_fraction).round() as usize;
    let per_coord = config.noise_sigma / (config.dim as f64).sqrt();

    let mut emb = EmbeddingSet::new(config.dim)?;
    let mut meta = MetadataMap::new();
    let mut assignment: BTreeMap<String, u32> = BTreeMap::new();
    let mut utt_counter = 0usize;

    let emit = |rng: &mut Rng,
                emb: &mut EmbeddingSet,
                meta: &mut MetadataMap,
                assignment: &mut BTreeMap<String, u32>,
                counter: &mut usize,
                class: u32,
                speaker: &str,
                center: &[f64],
                sigma: f64|
     -> Result<()> {
        let id = format!("u{:06}", *counter);
        *counter += 1;
        let raw: Vec<f64> = center.iter().map(|&c| c + sigma * rng.gauss()).collect();
        let unit = l2_normalize(&raw)
            .map_err(|_| Error::degenerate_ctx(format!("generated utterance `{id}`")))?;
        emb.push(id.clone(), &unit)?;
        let (dlo, dhi) = DURATION_RANGE_S;
        let duration_s = (rng.uniform(dlo.ln(), dhi.ln())).exp();
        let (slo, shi) = SNR_RANGE_DB;
        let snr_db = rng.uniform(slo, shi);
        meta.insert(
            id.clone(),
            UtteranceMetadata {
                duration_s,
                snr_db,
                speaker: Some(speaker.to_string()),
            },
        );
        assignment.insert(id, class);
        Ok(())
    };

    let mut impure_classes = Vec::with_capacity(n_impure);
    for class in 0..config.speakers {
        let base = random_unit(&mut rng, config.dim);
        if class < n_impure {
            impure_classes.push(class as u32);
            let axis = random_orthogonal(&mut rng, &base);
            let (cos_b, sin_b) = (IMPURE_HALF_ANGLE.cos(), IMPURE_HALF_ANGLE.sin());
            let lobe_a: Vec<f64> = base
                .iter()
                .zip(&axis)
                .map(|(b, u)| cos_b * b + sin_b * u)
                .collect();
            let lobe_b: Vec<f64> = base
                .iter()
                .zip(&axis)
                .map(|(b, u)| cos_b * b - sin_b * u)
                .collect();
            let sigma = per_coord * IMPURE_NOISE_FACTOR;
            let first_half = config.utts_per_speaker.div_ceil(2);
            for j in 0..config.utts_per_speaker {
                let (speaker, lobe) = if j < first_half {
                    (format!("spk{class:04}a"), &lobe_a)
                } else {
                    (format!("spk{class:04}b"), &lobe_b)
                };
                emit(
                    &mut rng,
                    &mut emb,
                    &mut meta,
                    &mut assignment,
                    &mut utt_counter,
                    class as u32,
                    &speaker,
                    lobe,
                    sigma,
                )?;
            }
        } else {
            let speaker = format!("spk{class:04}");
            for _ in 0..config.utts_per_speaker {
                emit(
                    &mut rng,
                    &mut emb,
                    &mut meta,
                    &mut assignment,
                    &mut utt_counter,
                    class as u32,
                    &speaker,
                    &base,
                    per_coord,
                )?;
            }
        }
    }

    Ok(SynthCorpus {
        embeddings: emb,
        metadata: meta,
        planted_classes: Partition::from_assignment(assignment),
        impure_classes,
    })
}

/// Sample labeled trials: target pairs share the true speaker, nontarget
/// pairs do not; no duplicate pairs; deterministic per seed. Targets come
/// first in the output.
pub fn generate_trials(
    meta: &MetadataMap,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, m) in meta {
        if let Some(speaker) = &m.speaker {
            by_speaker.entry(speaker).or_default().push(id);
        }
    }
    let utts: Vec<(&str, &str)> = by_speaker
        .iter()
        .flat_map(|(spk, ids)| ids.iter().map(move |id| (*id, *spk)))
        .collect();

    let target_pool: Vec<(usize, usize)> = {
        let mut pool = Vec::new();
        let mut offset = 0usize;
        for ids in by_speaker.values() {
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    pool.push((offset + i, offset + j));
                }
            }
            offset += ids.len();
        }
        pool
    };
    if n_target > target_pool.len() {
        return Err(Error::invalid(format!(
            "requested {n_target} target trials but only {} same-speaker pairs exist",
            target_pool.len()
        )));
    }
    let n = utts.len();
    let total_pairs = n * (n - 1) / 2;
    let cross_pairs = total_pairs - target_pool.len();
    if n_nontarget > cross_pairs {
        return Err(Error::invalid(format!(
            "requested {n_nontarget} nontarget trials but only {cross_pairs} cross-speaker pairs exist"
        )));
    }

    let mut rng = Rng::new(seed);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);

    let mut pool = target_pool;
    rng.shuffle(&mut pool);
    for &(i, j) in pool.iter().take(n_target) {
        trials.push(Trial::labeled(utts[i].0, utts[j].0, TrialLabel::Target));
    }

    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    if n_nontarget > cross_pairs / 2 {
        // Dense request: enumerate all cross pairs and shuffle.
        let mut pool: Vec<(usize, usize)> = Vec::with_capacity(cross_pairs);
        for i in 0..n {
            for j in i + 1..n {
                if utts[i].1 != utts[j].1 {
                    pool.push((i, j));
                }
            }
        }
        rng.shuffle(&mut pool);
        for &(i, j) in pool.iter().take(n_nontarget) {
            trials.push(Trial::labeled(utts[i].0, utts[j].0, TrialLabel::Nontarget));
        }
    } else {
        while seen.len() < n_nontarget {
            let i = rng.below(n as u64) as usize;
            let j = rng.below(n as u64) as usize;
            if i == j || utts[i].1 == utts[j].1 {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                trials.push(Trial::labeled(
                    utts[key.0].0,
                    utts[key.1].0,
                    TrialLabel::Nontarget,
                ));
            }
        }
    }
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::unit_cosine;

    fn small_config() -> SynthConfig {
        SynthConfig {
            speakers: 10,
            utts_per_speaker: 6,
            dim: 16,
            noise_sigma: 0.2,
            impure_fraction: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn zero_noise_reproduces_centroids() {
        let corpus = generate_embeddings(&SynthConfig {
            noise_sigma: 0.0,
            ..small_config()
        })
        .unwrap();
        for members in corpus
            .planted_classes
            .labels()
            .map(|l| corpus.planted_classes.members(l).unwrap())
        {
            let first = corpus.embeddings.get(&members[0]).unwrap();
            for id in members {
                let row = corpus.embeddings.get(id).unwrap();
                assert!((unit_cosine(first, row) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_identical_corpus() {
        let a = generate_embeddings(&small_config()).unwrap();
        let b = generate_embeddings(&small_config()).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.metadata, b.metadata);
    }

    #[test]
    fn generated_vectors_are_unit_norm() {
        let corpus = generate_embeddings(&small_config()).unwrap();
        for (_, row) in corpus.embeddings.iter() {
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn within_speaker_similarity_exceeds_cross() {
        let corpus = generate_embeddings(&SynthConfig {
            speakers: 50,
            utts_per_speaker: 20,
            dim: 64,
            noise_sigma: 0.3,
            impure_fraction: 0.0,
            seed: 7,
        })
        .unwrap();
        let emb = &corpus.embeddings;
        let speaker_of = |id: &str| corpus.metadata[id].speaker.clone().unwrap();
        let ids = emb.ids();
        let (mut within, mut wn, mut cross, mut cn) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let s = unit_cosine(emb.row(i), emb.row(j));
                if speaker_of(&ids[i]) == speaker_of(&ids[j]) {
                    within += s;
                    wn += 1;
                } else {
                    cross += s;
                    cn += 1;
                }
            }
        }
        assert!(within / wn as f64 > cross / cn as f64);
    }

    #[test]
    fn impure_classes_carry_two_speakers() {
        let corpus = generate_embeddings(&SynthConfig {
            impure_fraction: 0.3,
            ..small_config()
        })
        .unwrap();
        assert_eq!(corpus.impure_classes.len(), 3);
        for &label in &corpus.impure_classes {
            let members = corpus.planted_classes.members(label).unwrap();
            let speakers: BTreeSet<String> = members
                .iter()
                .map(|id| corpus.metadata[id].speaker.clone().unwrap())
                .collect();
            assert_eq!(speakers.len(), 2, "class {label}");
        }
    }

    #[test]
    fn durations_and_snrs_in_range() {
        let corpus = generate_embeddings(&small_config()).unwrap();
        for m in corpus.metadata.values() {
            assert!(m.duration_s >= 0.5 && m.duration_s <= 30.0);
            assert!(m.snr_db >= 0.0 && m.snr_db <= 30.0);
        }
    }

    #[test]
    fn trials_labels_match_planted_speakers() {
        let corpus = generate_embeddings(&small_config()).unwrap();
        let trials = generate_trials(&corpus.metadata, 100, 200, 3).unwrap();
        assert_eq!(trials.len(), 300);
        let mut seen = BTreeSet::new();
        for t in &trials {
            let same = corpus.metadata[&t.enroll].speaker == corpus.metadata[&t.test].speaker;
            match t.label.unwrap() {
                TrialLabel::Target => assert!(same),
                TrialLabel::Nontarget => assert!(!same),
            }
            let key = if t.enroll < t.test {
                (t.enroll.clone(), t.test.clone())
            } else {
                (t.test.clone(), t.enroll.clone())
            };
            assert!(seen.insert(key), "duplicate pair");
        }
    }

    #[test]
    fn trials_all_nontarget_when_no_targets_requested() {
        let corpus = generate_embeddings(&small_config()).unwrap();
        let trials = generate_trials(&corpus.metadata, 0, 50, 3).unwrap();
        assert!(trials
            .iter()
            .all(|t| t.label == Some(TrialLabel::Nontarget)));
    }

    #[test]
    fn trials_single_speaker_nontarget_is_error() {
        let corpus = generate_embeddings(&SynthConfig {
            speakers: 1,
            ..small_config()
        })
        .unwrap();
        assert!(generate_trials(&corpus.metadata, 1, 1, 3).is_err());
    }

    #[test]
    fn trials_deterministic() {
        let corpus = generate_embeddings(&small_config()).unwrap();
        let a = generate_trials(&corpus.metadata, 100, 100, 11).unwrap();
        let b = generate_trials(&corpus.metadata, 100, 100, 11).unwrap();
        assert_eq!(a, b);
    }
}
