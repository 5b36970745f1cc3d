//! Command-line front end: one subcommand per pipeline stage plus a one-shot
//! config-driven runner.
//!
//! Exit codes: 0 on success, 1 on validation or parse errors, 2 on I/O
//! failures. Diagnostics go to stderr; results go to files or stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trialkit::cluster;
use trialkit::error::{Error, Result};
use trialkit::metrics;
use trialkit::pipeline;
use trialkit::qmf;
use trialkit::scoring;
use trialkit::store;
use trialkit::store::{ScoredTrial, Trial};
use trialkit::subcenter;
use trialkit::synth;

#[derive(Parser)]
#[command(name = "trialkit", version, about = "Speaker-verification back-end toolkit")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted speakers.
    Synth(SynthArgs),
    /// Cosine-score a trial list.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply adaptive symmetric score normalization.
    Asnorm(AsnormArgs),
    /// Train the quality-measure-function calibrator.
    QmfTrain {
        /// AS-Norm score file over the calibration trials.
        #[arg(long)]
        scores: PathBuf,
        /// The same trials with target/nontarget labels.
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cap durations at this many seconds before the log transform.
        #[arg(long)]
        max_duration: Option<f64>,
    },
    /// Calibrate scores with a trained model.
    QmfApply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_duration: Option<f64>,
    },
    /// Weighted score-level fusion of several systems.
    Fuse {
        /// Score files covering the identical trial list.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Comma-separated weights, one per input.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `EER% mDCF` for a labeled trial list.
    Metrics {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Target prior for the detection cost.
        #[arg(long, default_value_t = 0.01)]
        ptarget: f64,
    },
    /// Print `T1 T2 T3` derived from a labeled subset.
    Thresholds {
        #[arg(long)]
        labeled_embeddings: PathBuf,
        #[arg(long)]
        labeled_metadata: PathBuf,
    },
    /// Build the pruned K-nearest-neighbor graph.
    Knn {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 200)]
        k: usize,
        /// Edge-pruning threshold (T1).
        #[arg(long)]
        t1: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a graph by map-equation minimization.
    Cluster {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        teleport: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove outlier members and undersized clusters.
    Clean {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Outlier threshold (T2).
        #[arg(long)]
        t2: f64,
        #[arg(long, default_value_t = 10)]
        min_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop low-purity clusters via a sub-center classifier.
    Purify(PurifyArgs),
    /// Progressively merge clusters whose centroids exceed T3.
    Merge {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Merge threshold (T3).
        #[arg(long)]
        t3: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pseudo-labeling pipeline from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    speakers: usize,
    #[arg(long)]
    utts: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    impure_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes `<prefix>.emb` and `<prefix>.tsv`.
    #[arg(long)]
    out_prefix: PathBuf,
    /// Also sample a labeled trial list.
    #[arg(long)]
    trials_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    n_target: usize,
    #[arg(long, default_value_t = 0)]
    n_nontarget: usize,
    #[arg(long, default_value_t = 0)]
    trial_seed: u64,
}

#[derive(Args)]
struct AsnormArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Raw score file to normalize.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Premade cohort embeddings.
    #[arg(long, conflicts_with_all = ["cohort_speakers", "cohort_sample"])]
    cohort: Option<PathBuf>,
    /// Build a speaker-wise cohort from this metadata (means over the
    /// scored embedding set).
    #[arg(long, conflicts_with = "cohort_sample")]
    cohort_speakers: Option<PathBuf>,
    /// Sample this many utterances from the scored embedding set.
    #[arg(long)]
    cohort_sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    top_k: usize,
    /// Persist the cohort that was used.
    #[arg(long)]
    save_cohort: Option<PathBuf>,
}

#[derive(Args)]
struct PurifyArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 3)]
    sub_centers: usize,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 32.0)]
    scale: f64,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    purity_threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-class purity table.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Score {
            embeddings,
            trials,
            out,
        } => {
            let emb = store::read_embeddings(&embeddings)?;
            let trials = store::read_trials(&trials)?;
            let scored = scoring::score_trials(&trials, &emb)?;
            store::write_scores(&scored, &out)
        }
        Command::Asnorm(args) => cmd_asnorm(args),
        Command::QmfTrain {
            scores,
            trials,
            embeddings,
            metadata,
            out,
            max_duration,
        } => cmd_qmf_train(scores, trials, embeddings, metadata, out, max_duration),
        Command::QmfApply {
            model,
            scores,
            embeddings,
            metadata,
            out,
            max_duration,
        } => {
            let model = store::read_qmf_model(&model)?;
            let scored = store::read_scores(&scores)?;
            let emb = store::read_embeddings(&embeddings)?;
            let meta = store::read_metadata(&metadata)?;
            let calibrated: Vec<ScoredTrial> = scored
                .iter()
                .map(|t| {
                    let features = qmf::extract_features(
                        &Trial::new(t.enroll.clone(), t.test.clone()),
                        &emb,
                        &meta,
                        t.score,
                        (model.snr_min, model.snr_max),
                        max_duration,
                    )?;
                    Ok(ScoredTrial {
                        enroll: t.enroll.clone(),
                        test: t.test.clone(),
                        label: t.label,
                        score: qmf::apply_qmf(&model, &features),
                    })
                })
                .collect::<Result<_>>()?;
            store::write_scores(&calibrated, &out)
        }
        Command::Fuse {
            inputs,
            weights,
            out,
        } => {
            let systems: Vec<Vec<ScoredTrial>> = inputs
                .iter()
                .map(|p| store::read_scores(p))
                .collect::<Result<_>>()?;
            let fused = scoring::fuse(&systems, &weights)?;
            store::write_scores(&fused, &out)
        }
        Command::Metrics {
            trials,
            scores,
            ptarget,
        } => {
            let trials = store::read_trials(&trials)?;
            let scored = attach_labels(&trials, store::read_scores(&scores)?)?;
            let eer = metrics::eer(&scored)?;
            let dcf = metrics::min_dcf(&scored, ptarget)?;
            println!("{:.4} {:.4}", eer * 100.0, dcf);
            Ok(())
        }
        Command::Thresholds {
            labeled_embeddings,
            labeled_metadata,
        } => {
            let emb = store::read_embeddings(&labeled_embeddings)?;
            let meta = store::read_metadata(&labeled_metadata)?;
            let t = cluster::determine_thresholds(&emb, &meta)?;
            println!("{:.6} {:.6} {:.6}", t.t1, t.t2, t.t3);
            Ok(())
        }
        Command::Knn {
            embeddings,
            k,
            t1,
            out,
        } => {
            let emb = store::read_embeddings(&embeddings)?;
            let graph = cluster::build_knn_graph(&emb, k, t1)?;
            store::write_graph(&graph, &out)
        }
        Command::Cluster {
            graph,
            teleport,
            seed,
            out,
        } => {
            let graph = store::read_graph(&graph)?;
            let result = cluster::infomap(&graph, &cluster::InfomapConfig { teleport, seed })?;
            eprintln!(
                "{} modules, codelength {:.6} bits",
                result.partition.cluster_count(),
                result.codelength
            );
            store::write_labels(&result.partition, &out)
        }
        Command::Clean {
            labels,
            embeddings,
            t2,
            min_size,
            out,
        } => {
            let partition = store::read_labels(&labels)?;
            let emb = store::read_embeddings(&embeddings)?;
            let cleaned = cluster::clean_clusters(&partition, &emb, t2, min_size)?;
            store::write_labels(&cleaned, &out)
        }
        Command::Purify(args) => cmd_purify(args),
        Command::Merge {
            labels,
            embeddings,
            t3,
            out,
        } => {
            let partition = store::read_labels(&labels)?;
            let emb = store::read_embeddings(&embeddings)?;
            let merged = cluster::merge_clusters(&partition, &emb, t3)?;
            store::write_labels(&merged, &out)
        }
        Command::Pipeline { config } => {
            let config = pipeline::parse_config_file(&config)?;
            let outcome = pipeline::run_pipeline(&config)?;
            let r = &outcome.report;
            eprintln!(
                "retained {}/{} utterances; clusters {} -> {} -> {} -> {}; labeled {}; {:.1}s",
                r.utterances_retained,
                r.utterances_total,
                r.clusters_initial,
                r.clusters_after_cleaning,
                r.clusters_after_cleaning - r.clusters_purged,
                r.clusters_final,
                r.utterances_labeled,
                r.runtime_s,
            );
            Ok(())
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = synth::SynthConfig {
        speakers: args.speakers,
        utts_per_speaker: args.utts,
        dim: args.dim,
        noise_sigma: args.noise_sigma,
        impure_fraction: args.impure_fraction,
        seed: args.seed,
    };
    let corpus = synth::generate_embeddings(&config)?;
    let emb_path = args.out_prefix.with_extension("emb");
    let meta_path = args.out_prefix.with_extension("tsv");
    store::write_embeddings(&corpus.embeddings, &emb_path)?;
    store::write_metadata(&corpus.metadata, &meta_path)?;
    eprintln!(
        "wrote {} utterances from {} planted classes ({} impure) to {} / {}",
        corpus.embeddings.len(),
        args.speakers,
        corpus.impure_classes.len(),
        emb_path.display(),
        meta_path.display(),
    );
    if let Some(trials_out) = args.trials_out {
        let trials = synth::generate_trials(
            &corpus.metadata,
            args.n_target,
            args.n_nontarget,
            args.trial_seed,
        )?;
        store_write_trials(&trials, &trials_out)?;
        eprintln!("wrote {} trials to {}", trials.len(), trials_out.display());
    }
    Ok(())
}

fn store_write_trials(trials: &[Trial], path: &PathBuf) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?,
    );
    for t in trials {
        let label = match t.label {
            Some(l) if l.is_target() => " 1",
            Some(_) => " 0",
            None => "",
        };
        w.write_all(format!("{} {}{}\n", t.enroll, t.test, label).as_bytes())
            .map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })
}

fn cmd_asnorm(args: AsnormArgs) -> Result<()> {
    let emb = store::read_embeddings(&args.embeddings)?;
    let scored = store::read_scores(&args.scores)?;
    let cohort = match (&args.cohort, &args.cohort_speakers, args.cohort_sample) {
        (Some(path), None, None) => {
            let set = store::read_embeddings(path)?;
            scoring::Cohort::from_embeddings(&set, scoring::CohortSource::UtteranceSample)?
        }
        (None, Some(meta_path), None) => {
            let meta = store::read_metadata(meta_path)?;
            scoring::build_speaker_cohort(&emb, &meta)?
        }
        (None, None, Some(n)) => scoring::sample_utterance_cohort(&emb, n, args.seed)?,
        _ => {
            return Err(Error::Invalid(
                "choose exactly one of --cohort, --cohort-speakers, --cohort-sample".into(),
            ))
        }
    };
    if let Some(path) = &args.save_cohort {
        store::write_embeddings(&cohort.to_embeddings(), path)?;
    }
    let normalized = scoring::as_norm(
        &scored,
        &emb,
        &cohort,
        &scoring::AsNormConfig { top_k: args.top_k },
    )?;
    store::write_scores(&normalized, &args.out)
}

fn cmd_qmf_train(
    scores: PathBuf,
    trials: PathBuf,
    embeddings: PathBuf,
    metadata: PathBuf,
    out: PathBuf,
    max_duration: Option<f64>,
) -> Result<()> {
    let trials = store::read_trials(&trials)?;
    let scored = attach_labels(&trials, store::read_scores(&scores)?)?;
    let emb = store::read_embeddings(&embeddings)?;
    let meta = store::read_metadata(&metadata)?;

    let snr_range = qmf::fit_snr_range(qmf::trial_snrs(&trials, &meta)?)?;
    let mut features = Vec::with_capacity(scored.len());
    let mut targets = Vec::with_capacity(scored.len());
    for t in &scored {
        let label = t
            .label
            .ok_or_else(|| Error::Invalid(format!("trial {} {} has no label", t.enroll, t.test)))?;
        features.push(qmf::extract_features(
            &Trial::new(t.enroll.clone(), t.test.clone()),
            &emb,
            &meta,
            t.score,
            snr_range,
            max_duration,
        )?);
        targets.push(label.is_target());
    }
    let model = qmf::train_qmf(&features, &targets, snr_range)?;
    store::write_qmf_model(&model, &out)
}

fn cmd_purify(args: PurifyArgs) -> Result<()> {
    let partition = store::read_labels(&args.labels)?;
    let emb = store::read_embeddings(&args.embeddings)?;
    let config = subcenter::SubCenterConfig {
        sub_centers: args.sub_centers,
        margin: args.margin,
        scale: args.scale,
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
    };
    let (model, _) = subcenter::train_subcenter(&emb, &partition, &config)?;
    let report = subcenter::assignment_report(&model, &emb, &partition)?;
    if let Some(path) = &args.report {
        store::write_purity_report(&report, path)?;
    }
    let purged = subcenter::purge_impure(&partition, &report, args.purity_threshold)?;
    eprintln!(
        "kept {}/{} clusters",
        purged.cluster_count(),
        partition.cluster_count()
    );
    store::write_labels(&purged, &args.out)
}

/// Scores and trials must list the same pairs in the same order; labels come
/// from the trial list.
fn attach_labels(trials: &[Trial], scored: Vec<ScoredTrial>) -> Result<Vec<ScoredTrial>> {
    if trials.len() != scored.len() {
        return Err(Error::Invalid(format!(
            "{} trials but {} scores",
            trials.len(),
            scored.len()
        )));
    }
    trials
        .iter()
        .zip(scored)
        .map(|(t, s)| {
            if t.enroll != s.enroll || t.test != s.test {
                return Err(Error::Invalid(format!(
                    "trial/score mismatch: ({} {}) vs ({} {})",
                    t.enroll, t.test, s.enroll, s.test
                )));
            }
            Ok(ScoredTrial {
                label: t.label,
                ..s
            })
        })
        .collect()
}
