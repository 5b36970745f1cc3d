//! Cross-module invariants: format round-trips, normalization and fusion
//! algebra, rank-only metric behavior, the KNN construction oracle, map
//! equation bounds, and the planted purification experiment.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use trialkit::cluster::{
    build_knn_graph, infomap, map_equation, InfomapConfig, Partition,
};
use trialkit::embed::{cosine, EmbeddingSet};
use trialkit::metrics::eer;
use trialkit::qmf::{apply_qmf, QmfFeatures, QmfModel};
use trialkit::rng::Rng;
use trialkit::scoring::{as_norm, fuse, AsNormConfig, Cohort, CohortSource};
use trialkit::store;
use trialkit::store::{ScoredTrial, Trial, TrialLabel};
use trialkit::subcenter::{assignment_report, purge_impure, train_subcenter, SubCenterConfig};
use trialkit::synth::{generate_embeddings, SynthConfig};

// ---------------------------------------------------------------------------
// Store round-trips.
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embeddings_round_trip_at_disk_precision(
        dim in 1usize..8,
        rows in proptest::collection::vec(
            proptest::collection::vec(-1000.0f32..1000.0, 0..8),
            0..12,
        ),
    ) {
        let set = EmbeddingSet::from_rows(
            dim,
            rows.iter().enumerate().map(|(i, r)| {
                let mut v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
                v.resize(dim, 0.25);
                (format!("utt{i:03}"), v)
            }),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        store::write_embeddings(&set, &path).unwrap();
        // f32-representable values survive the f32 disk format bit-exactly.
        prop_assert_eq!(store::read_embeddings(&path).unwrap(), set);
        // Rewriting what was read reproduces the file byte for byte.
        let bytes = std::fs::read(&path).unwrap();
        let again = dir.path().join("y.emb");
        store::write_embeddings(&store::read_embeddings(&path).unwrap(), &again).unwrap();
        prop_assert_eq!(std::fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn score_files_round_trip_canonically(
        scores in proptest::collection::vec(-100.0f64..100.0, 1..20),
    ) {
        let scored: Vec<ScoredTrial> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Trial::new(format!("e{i}"), format!("t{i}")).with_score(s))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        store::write_scores(&scored, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = store::read_scores(&path).unwrap();
        prop_assert_eq!(back.len(), scored.len());
        // A second write of the parsed file is byte-identical (6-decimal
        // fixed point is the canonical form).
        let again = dir.path().join("s2.txt");
        store::write_scores(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&again).unwrap(), first);
    }

    #[test]
    fn label_files_round_trip_canonically(
        assignment in proptest::collection::btree_map("u[a-z]{1,4}", 0u32..6, 0..20),
    ) {
        let partition = Partition::from_assignment(assignment);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.tsv");
        store::write_labels(&partition, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = store::read_labels(&path).unwrap();
        prop_assert_eq!(back.total_assigned(), partition.total_assigned());
        prop_assert_eq!(back.cluster_count(), partition.cluster_count());
        let again = dir.path().join("l2.tsv");
        store::write_labels(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn cosine_is_scale_invariant_and_symmetric(
        a in proptest::collection::vec(-10.0f64..10.0, 3),
        b in proptest::collection::vec(-10.0f64..10.0, 3),
        alpha in 0.001f64..100.0,
        beta in 0.001f64..100.0,
    ) {
        prop_assume!(a.iter().any(|&x| x.abs() > 1e-6));
        prop_assume!(b.iter().any(|&x| x.abs() > 1e-6));
        let base = cosine(&a, &b).unwrap();
        let scaled_a: Vec<f64> = a.iter().map(|x| alpha * x).collect();
        let scaled_b: Vec<f64> = b.iter().map(|x| beta * x).collect();
        prop_assert!((cosine(&scaled_a, &scaled_b).unwrap() - base).abs() < 1e-12);
        prop_assert_eq!(cosine(&b, &a).unwrap(), base);
    }

    #[test]
    fn fuse_is_linear_in_the_weights(
        scores in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
        w1 in proptest::collection::vec(-2.0f64..2.0, 2),
        w2 in proptest::collection::vec(-2.0f64..2.0, 2),
    ) {
        prop_assume!(w1.iter().any(|&w| w != 0.0));
        prop_assume!(w2.iter().any(|&w| w != 0.0));
        prop_assume!(w1.iter().zip(&w2).any(|(a, b)| a + b != 0.0));
        let systems: Vec<Vec<ScoredTrial>> = (0..2)
            .map(|k| {
                scores
                    .iter()
                    .enumerate()
                    .map(|(i, &(s1, s2))| {
                        Trial::new(format!("e{i}"), format!("t{i}"))
                            .with_score(if k == 0 { s1 } else { s2 })
                    })
                    .collect()
            })
            .collect();
        let sum_w: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let fused_sum = fuse(&systems, &sum_w).unwrap();
        let fused_1 = fuse(&systems, &w1).unwrap();
        let fused_2 = fuse(&systems, &w2).unwrap();
        for i in 0..scores.len() {
            prop_assert!(
                (fused_sum[i].score - (fused_1[i].score + fused_2[i].score)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn metrics_depend_only_on_rank_order(
        raw in proptest::collection::vec((-3.0f64..3.0, proptest::bool::ANY), 4..40),
    ) {
        prop_assume!(raw.iter().any(|&(_, y)| y));
        prop_assume!(raw.iter().any(|&(_, y)| !y));
        let trials: Vec<ScoredTrial> = raw
            .iter()
            .enumerate()
            .map(|(i, &(s, y))| {
                Trial::labeled(
                    format!("e{i}"),
                    format!("t{i}"),
                    if y { TrialLabel::Target } else { TrialLabel::Nontarget },
                )
                .with_score(s)
            })
            .collect();
        let e = eer(&trials).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        for p in [0.01, 0.05, 0.5] {
            let d = trialkit::metrics::min_dcf(&trials, p).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        }
        // s -> s^3 + 2s is strictly increasing.
        let transformed: Vec<ScoredTrial> = trials
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.score = t.score.powi(3) + 2.0 * t.score;
                t
            })
            .collect();
        prop_assert_eq!(e.to_bits(), eer(&transformed).unwrap().to_bits());
    }
}

#[test]
fn scored_trials_match_pairwise_cosine_oracle() {
    let mut rng = Rng::new(404);
    let emb = EmbeddingSet::from_rows(
        8,
        (0..40).map(|i| {
            let v: Vec<f64> = (0..8).map(|_| rng.gauss() * 3.0).collect();
            (format!("u{i:02}"), v)
        }),
    )
    .unwrap();
    let trials: Vec<Trial> = (0..100)
        .map(|_| {
            let a = rng.below(40);
            let b = rng.below(40);
            Trial::new(format!("u{a:02}"), format!("u{b:02}"))
        })
        .collect();
    let scored = trialkit::scoring::score_trials(&trials, &emb).unwrap();
    for (t, s) in trials.iter().zip(&scored) {
        let want = cosine(emb.get(&t.enroll).unwrap(), emb.get(&t.test).unwrap()).unwrap();
        assert!((s.score - want).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// AS-Norm algebra on a fixed random setup.
// ---------------------------------------------------------------------------

fn random_unit_set(rng: &mut Rng, prefix: &str, n: usize, dim: usize) -> EmbeddingSet {
    EmbeddingSet::from_rows(
        dim,
        (0..n).map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gauss()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (
                format!("{prefix}{i:04}"),
                v.iter().map(|x| x / norm).collect::<Vec<f64>>(),
            )
        }),
    )
    .unwrap()
}

#[test]
fn asnorm_is_affine_increasing_and_order_invariant() {
    let mut rng = Rng::new(77);
    let emb = random_unit_set(&mut rng, "u", 20, 16);
    let cohort_fwd = random_unit_set(&mut rng, "c", 50, 16);
    let cohort = Cohort::from_embeddings(&cohort_fwd, CohortSource::UtteranceSample).unwrap();
    // Same entries, reversed order.
    let reversed = EmbeddingSet::from_rows(
        16,
        (0..cohort_fwd.len())
            .rev()
            .map(|i| (cohort_fwd.ids()[i].clone(), cohort_fwd.row(i).to_vec())),
    )
    .unwrap();
    let cohort_rev = Cohort::from_embeddings(&reversed, CohortSource::UtteranceSample).unwrap();

    let config = AsNormConfig { top_k: 20 };
    let trials: Vec<ScoredTrial> = (0..10)
        .map(|i| {
            Trial::new(format!("u{:04}", i), format!("u{:04}", 19 - i))
                .with_score(rng.uniform(-0.5, 0.9))
        })
        .collect();

    let base = as_norm(&trials, &emb, &cohort, &config).unwrap();

    // Affine and strictly increasing in the raw score.
    for (i, t) in trials.iter().enumerate() {
        for delta in [0.25, 0.5, 1.0] {
            let mut lifted = t.clone();
            lifted.score += delta;
            let out = as_norm(&[lifted], &emb, &cohort, &config).unwrap();
            assert!(out[0].score > base[i].score);
            // Affinity: equal steps produce equal increments.
            let mut lifted2 = t.clone();
            lifted2.score += 2.0 * delta;
            let out2 = as_norm(&[lifted2], &emb, &cohort, &config).unwrap();
            let inc1 = out[0].score - base[i].score;
            let inc2 = out2[0].score - out[0].score;
            assert!((inc1 - inc2).abs() < 1e-12);
        }
    }

    // Invariant to cohort entry order.
    let rev = as_norm(&trials, &emb, &cohort_rev, &config).unwrap();
    for (a, b) in base.iter().zip(&rev) {
        assert!((a.score - b.score).abs() < 1e-12);
    }

    // Invariant to trial list permutation.
    let mut permuted = trials.clone();
    permuted.reverse();
    let perm_out = as_norm(&permuted, &emb, &cohort, &config).unwrap();
    for (a, b) in base.iter().rev().zip(&perm_out) {
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }

    // Swap symmetry: scores of (a, b) and (b, a) agree.
    let swapped: Vec<ScoredTrial> = trials
        .iter()
        .map(|t| ScoredTrial {
            enroll: t.test.clone(),
            test: t.enroll.clone(),
            label: t.label,
            score: t.score,
        })
        .collect();
    let swap_out = as_norm(&swapped, &emb, &cohort, &config).unwrap();
    for (a, b) in base.iter().zip(&swap_out) {
        assert!((a.score - b.score).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// KNN graph vs the quadratic oracle.
// ---------------------------------------------------------------------------

#[test]
fn knn_graph_matches_quadratic_oracle() {
    let mut rng = Rng::new(88);
    let n = 500;
    let dim = 16;
    let k = 10;
    let t1 = 0.2;
    let emb = EmbeddingSet::from_rows(
        dim,
        (0..n).map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gauss()).collect();
            (format!("p{i:04}"), v)
        }),
    )
    .unwrap();
    let graph = build_knn_graph(&emb, k, t1).unwrap();

    // Oracle: full similarity matrix over id-sorted unit rows, per-row top-k
    // by (similarity desc, id asc), union the directions, prune below t1.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| emb.ids()[a].cmp(&emb.ids()[b]));
    let rows: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let r = emb.row(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    let sim = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
    };
    let mut expected: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sim(&rows[i], &rows[j]), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(w, j) in sims.iter().take(k) {
            if w >= t1 {
                let key = (i.min(j) as u32, i.max(j) as u32);
                expected.entry(key).or_insert(w);
            }
        }
    }
    let got: BTreeMap<(u32, u32), f64> = graph
        .edges()
        .iter()
        .map(|&(a, b, w)| ((a, b), w))
        .collect();
    assert_eq!(got.len(), expected.len());
    for (key, want) in &expected {
        let got_w = got.get(key).unwrap_or_else(|| panic!("missing edge {key:?}"));
        assert_eq!(got_w.to_bits(), want.to_bits(), "edge {key:?}");
    }
}

// ---------------------------------------------------------------------------
// Map equation bounds on random graphs.
// ---------------------------------------------------------------------------

#[test]
fn infomap_beats_trivial_partitions() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(500 + seed);
        let n = 5 + (seed as usize % 36);
        let mut edges = Vec::new();
        for a in 0..n as u32 {
            for b in a + 1..n as u32 {
                if rng.next_f64() < 0.2 {
                    edges.push((a, b, rng.uniform(0.05, 1.0)));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.knng");
        let mut text = format!("knng {} {}\n", n, edges.len());
        for i in 0..n {
            text.push_str(&format!("n{i:03}\n"));
        }
        for (a, b, w) in &edges {
            text.push_str(&format!("{a} {b} {w:.16e}\n"));
        }
        std::fs::write(&path, text).unwrap();
        let graph = store::read_graph(&path).unwrap();

        let result = infomap(&graph, &InfomapConfig::default()).unwrap();
        let singles: BTreeMap<String, u32> = graph
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        let all: BTreeMap<String, u32> =
            graph.nodes().iter().map(|id| (id.clone(), 0)).collect();
        let l_single = map_equation(&graph, &singles, 0.15).unwrap();
        let l_all = map_equation(&graph, &all, 0.15).unwrap();
        assert!(result.codelength <= l_single + 1e-12, "seed {seed}");
        assert!(result.codelength <= l_all + 1e-12, "seed {seed}");

        let again = infomap(&graph, &InfomapConfig::default()).unwrap();
        assert_eq!(result.partition, again.partition, "seed {seed}");
    }
}

// ---------------------------------------------------------------------------
// Planted purification experiment on frozen planted labels.
// ---------------------------------------------------------------------------

#[test]
fn subcenter_purges_planted_impure_classes() {
    // 30-member classes: the farthest-point-seeded sub-centers always claim
    // at least their own seed member, so smaller classes cap the dominant
    // fraction noticeably below 1.
    let corpus = generate_embeddings(&SynthConfig {
        speakers: 40,
        utts_per_speaker: 30,
        dim: 64,
        noise_sigma: 0.3,
        impure_fraction: 0.1,
        seed: 909,
    })
    .unwrap();
    let labels = &corpus.planted_classes;
    let (model, losses) = train_subcenter(
        &corpus.embeddings,
        labels,
        &SubCenterConfig::default(),
    )
    .unwrap();
    assert!(losses.last().unwrap() < losses.first().unwrap());

    let report = assignment_report(&model, &corpus.embeddings, labels).unwrap();
    let impure: BTreeSet<u32> = corpus.impure_classes.iter().copied().collect();

    let mut pure_fracs = Vec::new();
    for row in &report.rows {
        if impure.contains(&row.class) {
            // Two equal-size planted speakers per class.
            assert!(
                (row.dominant_fraction - 0.5).abs() <= 0.1,
                "impure class {} has dominant fraction {:.3}",
                row.class,
                row.dominant_fraction
            );
        } else {
            pure_fracs.push(row.dominant_fraction);
        }
    }
    let mean_pure = pure_fracs.iter().sum::<f64>() / pure_fracs.len() as f64;
    assert!(mean_pure >= 0.9, "mean pure dominant fraction {mean_pure:.3}");

    let purged = purge_impure(labels, &report, 0.7).unwrap();
    let removed: Vec<u32> = labels
        .labels()
        .filter(|&l| purged.members(l).is_none())
        .collect();
    let removed_impure = removed.iter().filter(|l| impure.contains(l)).count();
    let removed_pure = removed.len() - removed_impure;
    assert!(
        removed_impure as f64 >= 0.9 * impure.len() as f64,
        "{removed_impure}/{} impure removed",
        impure.len()
    );
    assert!(
        (removed_pure as f64) <= 0.05 * (labels.cluster_count() - impure.len()) as f64,
        "{removed_pure} pure classes removed"
    );

    // Purging never grows a surviving class.
    for (&label, members) in purged.clusters() {
        assert_eq!(labels.members(label).unwrap(), members.as_slice());
    }
}

// ---------------------------------------------------------------------------
// QMF identity-on-score calibration leaves metrics untouched.
// ---------------------------------------------------------------------------

#[test]
fn qmf_score_only_weights_preserve_eer() {
    let mut rng = Rng::new(404);
    let model = QmfModel::new([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.5], 0.0, 0.0, 30.0).unwrap();
    let trials: Vec<(ScoredTrial, QmfFeatures)> = (0..200)
        .map(|i| {
            let target = i % 2 == 0;
            let score = if target {
                rng.uniform(0.2, 1.0)
            } else {
                rng.uniform(-0.4, 0.6)
            };
            let features = QmfFeatures([
                rng.uniform(0.0, 3.0),
                rng.uniform(0.0, 3.0),
                1.0,
                1.0,
                rng.next_f64(),
                rng.next_f64(),
                score,
            ]);
            let t = Trial::labeled(
                format!("e{i}"),
                format!("t{i}"),
                if target { TrialLabel::Target } else { TrialLabel::Nontarget },
            )
            .with_score(score);
            (t, features)
        })
        .collect();
    let raw: Vec<ScoredTrial> = trials.iter().map(|(t, _)| t.clone()).collect();
    let calibrated: Vec<ScoredTrial> = trials
        .iter()
        .map(|(t, f)| {
            let mut t = t.clone();
            t.score = apply_qmf(&model, f);
            t
        })
        .collect();
    assert_eq!(
        eer(&raw).unwrap().to_bits(),
        eer(&calibrated).unwrap().to_bits()
    );
}

// ---------------------------------------------------------------------------
// Pipeline on a clean 50-speaker corpus lands near 50 clusters.
// ---------------------------------------------------------------------------

#[test]
fn pipeline_cluster_count_tracks_planted_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let corpus = generate_embeddings(&SynthConfig {
        speakers: 50,
        utts_per_speaker: 25,
        dim: 64,
        noise_sigma: 0.25,
        impure_fraction: 0.0,
        seed: 606,
    })
    .unwrap();
    let labeled = generate_embeddings(&SynthConfig {
        speakers: 50,
        utts_per_speaker: 20,
        dim: 64,
        noise_sigma: 0.25,
        impure_fraction: 0.0,
        seed: 607,
    })
    .unwrap();
    store::write_embeddings(&corpus.embeddings, &p("pool.emb")).unwrap();
    store::write_metadata(&corpus.metadata, &p("pool.tsv")).unwrap();
    store::write_embeddings(&labeled.embeddings, &p("labeled.emb")).unwrap();
    store::write_metadata(&labeled.metadata, &p("labeled.tsv")).unwrap();
    let config = trialkit::pipeline::PipelineConfig::with_paths(
        p("pool.emb"),
        p("pool.tsv"),
        p("labeled.emb"),
        p("labeled.tsv"),
        p("labels.tsv"),
    );
    let outcome = trialkit::pipeline::run_pipeline(&config).unwrap();
    let count = outcome.report.clusters_final;
    assert!(
        (45..=55).contains(&count),
        "expected 45..=55 clusters, got {count}"
    );
}

// ---------------------------------------------------------------------------
// Synthetic corpus determinism at the byte level.
// ---------------------------------------------------------------------------

#[test]
fn synth_outputs_are_byte_identical_per_seed() {
    let config = SynthConfig {
        speakers: 12,
        utts_per_speaker: 5,
        dim: 16,
        noise_sigma: 0.2,
        impure_fraction: 0.25,
        seed: 31,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let corpus = generate_embeddings(&config).unwrap();
        let emb = dir.path().join(format!("{run}.emb"));
        let meta = dir.path().join(format!("{run}.tsv"));
        store::write_embeddings(&corpus.embeddings, &emb).unwrap();
        store::write_metadata(&corpus.metadata, &meta).unwrap();
        bytes.push((std::fs::read(&emb).unwrap(), std::fs::read(&meta).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
}
