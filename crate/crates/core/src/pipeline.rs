//! One-shot pseudo-labeling pipeline and its `key = value` config file.
//!
//! Stages run in order: duration filtering, threshold determination from the
//! labeled subset, KNN graph, map-equation clustering, outlier cleaning,
//! sub-center purification, progressive merging, label output. Every stage
//! writes to and reads from the file formats in [`crate::store`], so stages
//! can also be rerun independently through the CLI.
//!
//! Config lines are `key = value`, UTF-8, with `#` comments and dotted
//! section prefixes (`infomap.teleport = 0.15`). Relative paths resolve
//! against the config file's directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cluster::{
    build_knn_graph, clean_clusters, determine_thresholds, filter_short, infomap, merge_clusters,
    InfomapConfig, Partition, Thresholds,
};
use crate::error::{Error, Result};
use crate::store;
use crate::subcenter::{assignment_report, purge_impure, train_subcenter, SubCenterConfig};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub embeddings: PathBuf,
    pub metadata: PathBuf,
    pub labeled_embeddings: PathBuf,
    pub labeled_metadata: PathBuf,
    pub labels_out: PathBuf,
    pub report_out: Option<PathBuf>,
    pub knn_k: usize,
    /// Carried for the scoring stages that share this config; the label
    /// pipeline itself does not normalize scores.
    pub asnorm_top_k: usize,
    pub min_cluster_size: usize,
    pub min_duration: f64,
    pub subcenter: SubCenterConfig,
    pub purity_threshold: f64,
    pub infomap: InfomapConfig,
    pub fusion_weights: Vec<f64>,
    pub qmf_p_targets: Vec<f64>,
}

impl PipelineConfig {
    /// Config with spec defaults for everything but the five paths.
    pub fn with_paths(
        embeddings: impl Into<PathBuf>,
        metadata: impl Into<PathBuf>,
        labeled_embeddings: impl Into<PathBuf>,
        labeled_metadata: impl Into<PathBuf>,
        labels_out: impl Into<PathBuf>,
    ) -> Self {
        PipelineConfig {
            embeddings: embeddings.into(),
            metadata: metadata.into(),
            labeled_embeddings: labeled_embeddings.into(),
            labeled_metadata: labeled_metadata.into(),
            labels_out: labels_out.into(),
            report_out: None,
            knn_k: 200,
            asnorm_top_k: 300,
            min_cluster_size: 10,
            min_duration: 1.0,
            subcenter: SubCenterConfig::default(),
            purity_threshold: 0.7,
            infomap: InfomapConfig::default(),
            fusion_weights: Vec::new(),
            qmf_p_targets: vec![0.01, 0.05],
        }
    }
}

/// Parse the flat config format. `base` anchors relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<PipelineConfig> {
    let mut values: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!("config line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if values.insert(key.clone(), value).is_some() {
            return Err(Error::invalid(format!("config key `{key}` given twice")));
        }
    }

    let mut take = |key: &str| values.remove(key);
    let path_of = |v: String| -> PathBuf {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let required_path = |key: &str, v: Option<String>| -> Result<PathBuf> {
        v.map(path_of).ok_or_else(|| {
            Error::invalid(format!("config is missing required key `{key}`"))
        })
    };

    fn number<T: std::str::FromStr>(key: &str, v: Option<String>, default: T) -> Result<T> {
        match v {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::invalid(format!("config key `{key}`: bad value `{s}`"))),
        }
    }
    fn list(key: &str, v: Option<String>, default: Vec<f64>) -> Result<Vec<f64>> {
        match v {
            None => Ok(default),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("config key `{key}`: bad value `{x}`")))
                })
                .collect(),
        }
    }

    let embeddings = required_path("embeddings", take("embeddings"))?;
    let metadata = required_path("metadata", take("metadata"))?;
    let labeled_embeddings = required_path("labeled_embeddings", take("labeled_embeddings"))?;
    let labeled_metadata = required_path("labeled_metadata", take("labeled_metadata"))?;
    let labels_out = required_path("labels_out", take("labels_out"))?;
    let report_out = take("report_out").map(path_of);

    let config = PipelineConfig {
        embeddings,
        metadata,
        labeled_embeddings,
        labeled_metadata,
        labels_out,
        report_out,
        knn_k: number("knn.k", take("knn.k"), 200)?,
        asnorm_top_k: number("asnorm.top_k", take("asnorm.top_k"), 300)?,
        min_cluster_size: number("clean.min_size", take("clean.min_size"), 10)?,
        min_duration: number("filter.min_duration", take("filter.min_duration"), 1.0)?,
        subcenter: SubCenterConfig {
            sub_centers: number("subcenter.k", take("subcenter.k"), 3)?,
            margin: number("subcenter.margin", take("subcenter.margin"), 0.2)?,
            scale: number("subcenter.scale", take("subcenter.scale"), 32.0)?,
            epochs: number("subcenter.epochs", take("subcenter.epochs"), 15)?,
            batch_size: number("subcenter.batch", take("subcenter.batch"), 256)?,
            learning_rate: number("subcenter.lr", take("subcenter.lr"), 0.1)?,
            seed: number("subcenter.seed", take("subcenter.seed"), 0)?,
        },
        purity_threshold: number(
            "subcenter.purity_threshold",
            take("subcenter.purity_threshold"),
            0.7,
        )?,
        infomap: InfomapConfig {
            teleport: number("infomap.teleport", take("infomap.teleport"), 0.15)?,
            seed: number("infomap.seed", take("infomap.seed"), 0)?,
        },
        fusion_weights: list("fusion.weights", take("fusion.weights"), Vec::new())?,
        qmf_p_targets: list("qmf.p_targets", take("qmf.p_targets"), vec![0.01, 0.05])?,
    };
    if let Some(key) = values.keys().next() {
        return Err(Error::invalid(format!("unknown config key `{key}`")));
    }
    Ok(config)
}

pub fn parse_config_file(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base)
}

/// Run summary written next to the label file.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub utterances_total: usize,
    pub utterances_retained: usize,
    pub thresholds: Thresholds,
    pub codelength: f64,
    pub clusters_initial: usize,
    pub clusters_after_cleaning: usize,
    pub clusters_purged: usize,
    pub clusters_final: usize,
    pub utterances_labeled: usize,
    pub runtime_s: f64,
}

/// Everything a caller may want to inspect after a run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub initial_partition: Partition,
    pub after_cleaning: Partition,
    pub purged_clusters: Vec<u32>,
    pub final_partition: Partition,
}

fn write_report(report: &PipelineReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let t = &report.thresholds;
    let body = format!(
        "utterances\t{}\nretained\t{}\nt1\t{:.6}\nt2\t{:.6}\nt3\t{:.6}\ncodelength\t{:.6}\nclusters_initial\t{}\nclusters_cleaned\t{}\nclusters_purged\t{}\nclusters_final\t{}\nlabeled\t{}\n",
        report.utterances_total,
        report.utterances_retained,
        t.t1,
        t.t2,
        t.t3,
        report.codelength,
        report.clusters_initial,
        report.clusters_after_cleaning,
        report.clusters_purged,
        report.clusters_final,
        report.utterances_labeled,
    );
    w.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Execute the full pseudo-labeling pipeline and write the label file (and
/// report, when configured). Output is a pure function of the inputs and
/// the config.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let started = Instant::now();

    let embeddings = store::read_embeddings(&config.embeddings)?;
    let metadata = store::read_metadata(&config.metadata)?;
    let labeled_emb = store::read_embeddings(&config.labeled_embeddings)?;
    let labeled_meta = store::read_metadata(&config.labeled_metadata)?;

    // Pre-processing: keep utterances longer than the minimum duration.
    let retained_ids = filter_short(&metadata, config.min_duration);
    let retained = embeddings.filtered(|id| retained_ids.contains(id))?;
    if retained.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} utterances retained after duration filtering",
            retained.len()
        )));
    }

    let thresholds = determine_thresholds(&labeled_emb, &labeled_meta)?;

    // Initial clustering.
    let graph = build_knn_graph(&retained, config.knn_k, thresholds.t1)?;
    let clustered = infomap(&graph, &config.infomap)?;

    // Outlier and small-cluster cleaning.
    let cleaned = clean_clusters(
        &clustered.partition,
        &retained,
        thresholds.t2,
        config.min_cluster_size,
    )?;

    // Sub-center purification (needs at least two classes to train).
    let (purged_partition, purged_clusters) = if cleaned.cluster_count() >= 2 {
        let (model, _losses) = train_subcenter(&retained, &cleaned, &config.subcenter)?;
        let report = assignment_report(&model, &retained, &cleaned)?;
        let kept = purge_impure(&cleaned, &report, config.purity_threshold)?;
        let purged: Vec<u32> = cleaned
            .labels()
            .filter(|&l| kept.members(l).is_none())
            .collect();
        (kept, purged)
    } else {
        (cleaned.clone(), Vec::new())
    };

    // Progressive merging.
    let merged = merge_clusters(&purged_partition, &retained, thresholds.t3)?;

    store::write_labels(&merged, &config.labels_out)?;

    let report = PipelineReport {
        utterances_total: embeddings.len(),
        utterances_retained: retained.len(),
        thresholds,
        codelength: clustered.codelength,
        clusters_initial: clustered.partition.cluster_count(),
        clusters_after_cleaning: cleaned.cluster_count(),
        clusters_purged: purged_clusters.len(),
        clusters_final: merged.cluster_count(),
        utterances_labeled: merged.total_assigned(),
        runtime_s: started.elapsed().as_secs_f64(),
    };
    if let Some(path) = &config.report_out {
        write_report(&report, path)?;
    }

    Ok(PipelineOutcome {
        report,
        initial_partition: clustered.partition,
        after_cleaning: cleaned,
        purged_clusters,
        final_partition: merged,
    })
}
