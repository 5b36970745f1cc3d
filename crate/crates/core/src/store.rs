//! File formats and persistence: embeddings, metadata, trials, scores,
//! cluster labels, KNN graphs, and calibration models.
//!
//! Binary format (`.emb`), little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "EMB1"
//! dim     u32      vector dimension, >= 1
//! count   u32      number of records
//! record  u16      id byte length
//!         ...      id, UTF-8
//!         f32*dim  vector values
//! ```
//!
//! Vectors are float32 on disk and float64 in memory. Text formats are UTF-8,
//! tolerate CRLF and a missing trailing newline, and skip blank lines and
//! lines starting with `#`:
//!
//! * metadata: TSV `id  duration_s  snr_db  [speaker]`
//! * trials: whitespace-separated `enroll test [label]`, label `1`/`0` or
//!   `target`/`nontarget`
//! * scores: `enroll test score`, score fixed-point with 6 decimals
//! * labels: TSV `utterance-id  cluster-id`; cluster ids are dense integers
//!   `0..C-1` ordered by descending cluster size, ties by lexicographically
//!   smallest member
//! * graph: header `knng N M`, then N node-id lines (sorted), then M edge
//!   lines `a b weight` with 0-based node indices `a < b`
//! * QMF model: 9 lines; 7 weights, bias, then `snr_min snr_max`, every
//!   number printed with 17 significant digits

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cluster::{KnnGraph, Partition};
use crate::embed::{EmbeddingSet, MetadataMap, UtteranceMetadata};
use crate::error::{Error, Result};
use crate::qmf::QmfModel;
use crate::subcenter::PurityReport;

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Trial ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        matches!(self, TrialLabel::Target)
    }
}

/// An (enrollment, test) utterance pair, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: Option<TrialLabel>,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>) -> Self {
        Trial {
            enroll: enroll.into(),
            test: test.into(),
            label: None,
        }
    }

    pub fn labeled(
        enroll: impl Into<String>,
        test: impl Into<String>,
        label: TrialLabel,
    ) -> Self {
        Trial {
            enroll: enroll.into(),
            test: test.into(),
            label: Some(label),
        }
    }

    pub fn with_score(&self, score: f64) -> ScoredTrial {
        ScoredTrial {
            enroll: self.enroll.clone(),
            test: self.test.clone(),
            label: self.label,
            score,
        }
    }
}

/// A trial with a real-valued score attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub label: Option<TrialLabel>,
    pub score: f64,
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Lines of a text file with `\r` stripped; blank and `#` lines removed.
/// Yields (1-based line number, content).
fn text_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = open_reader(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line).to_string();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path, e);
    w.write_all(EMB_MAGIC).map_err(io_err)?;
    w.write_all(&(set.dim() as u32).to_le_bytes()).map_err(io_err)?;
    if set.len() > u32::MAX as usize {
        return Err(Error::invalid("embedding set too large for format"));
    }
    w.write_all(&(set.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (id, row) in set.iter() {
        let bytes = id.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::invalid(format!(
                "utterance id longer than 65535 bytes: `{}...`",
                &id[..32.min(id.len())]
            )));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut r = open_reader(path)?;
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::parse(path, 0, "truncated file");

    if buf.len() < 12 {
        return Err(truncated());
    }
    if &buf[0..4] != EMB_MAGIC {
        return Err(Error::parse(path, 0, "bad magic"));
    }
    let dim = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::parse(path, 0, "zero dimension"));
    }

    let mut set = EmbeddingSet::new(dim)?;
    let mut off = 12usize;
    let mut row = vec![0.0f64; dim];
    for _ in 0..count {
        if off + 2 > buf.len() {
            return Err(truncated());
        }
        let id_len = u16::from_le_bytes(buf[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        if off + id_len + 4 * dim > buf.len() {
            return Err(truncated());
        }
        let id = std::str::from_utf8(&buf[off..off + id_len])
            .map_err(|_| Error::parse(path, 0, "utterance id is not valid UTF-8"))?
            .to_string();
        off += id_len;
        for x in row.iter_mut() {
            *x = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        set.push(id, &row)?;
    }
    if off != buf.len() {
        return Err(Error::parse(path, 0, "trailing data after last record"));
    }
    Ok(set)
}

pub fn read_metadata(path: &Path) -> Result<MetadataMap> {
    let mut map = MetadataMap::new();
    for (lineno, line) in text_lines(path)? {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 or 4 tab-separated columns, got {}", cols.len()),
            ));
        }
        let id = cols[0].to_string();
        let duration_s: f64 = cols[1]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad duration `{}`", cols[1])))?;
        let snr_db: f64 = cols[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad snr `{}`", cols[2])))?;
        if !duration_s.is_finite() || duration_s <= 0.0 {
            return Err(Error::parse(
                path,
                lineno,
                format!("non-positive duration `{}`", cols[1]),
            ));
        }
        if !snr_db.is_finite() {
            return Err(Error::parse(path, lineno, format!("bad snr `{}`", cols[2])));
        }
        let speaker = match cols.get(3) {
            Some(s) if !s.is_empty() => Some((*s).to_string()),
            Some(_) => return Err(Error::parse(path, lineno, "empty speaker column")),
            None => None,
        };
        if map.contains_key(&id) {
            return Err(Error::DuplicateUtterance(id));
        }
        map.insert(
            id,
            UtteranceMetadata {
                duration_s,
                snr_db,
                speaker,
            },
        );
    }
    Ok(map)
}

pub fn write_metadata(meta: &MetadataMap, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    for (id, m) in meta {
        let line = match &m.speaker {
            Some(s) => format!("{id}\t{:.6}\t{:.6}\t{s}\n", m.duration_s, m.snr_db),
            None => format!("{id}\t{:.6}\t{:.6}\n", m.duration_s, m.snr_db),
        };
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_label(token: &str) -> Option<TrialLabel> {
    match token {
        "1" | "target" => Some(TrialLabel::Target),
        "0" | "nontarget" => Some(TrialLabel::Nontarget),
        _ => None,
    }
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (lineno, line) in text_lines(path)? {
        let cols: Vec<&str> = line.split_whitespace().collect();
        match cols.len() {
            2 => trials.push(Trial::new(cols[0], cols[1])),
            3 => {
                let label = parse_label(cols[2]).ok_or_else(|| {
                    Error::parse(path, lineno, format!("bad trial label `{}`", cols[2]))
                })?;
                trials.push(Trial::labeled(cols[0], cols[1], label));
            }
            n => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected 2 or 3 columns, got {n}"),
                ))
            }
        }
    }
    Ok(trials)
}

/// Write `enroll test score` lines, preserving trial order.
pub fn write_scores(scored: &[ScoredTrial], path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    for t in scored {
        w.write_all(format!("{} {} {:.6}\n", t.enroll, t.test, t.score).as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredTrial>> {
    let mut scored = Vec::new();
    for (lineno, line) in text_lines(path)? {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 columns, got {}", cols.len()),
            ));
        }
        let score: f64 = cols[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad score `{}`", cols[2])))?;
        scored.push(ScoredTrial {
            enroll: cols[0].to_string(),
            test: cols[1].to_string(),
            label: None,
            score,
        });
    }
    Ok(scored)
}

/// Cluster labels renumbered densely at write time: cluster ids `0..C-1`
/// ordered by descending size, ties by smallest member id. Output is
/// therefore independent of how internal labels were generated.
pub fn write_labels(partition: &Partition, path: &Path) -> Result<()> {
    let mut clusters: Vec<(&u32, &Vec<String>)> = partition.clusters().collect();
    clusters.sort_by(|(_, a), (_, b)| {
        b.len()
            .cmp(&a.len())
            .then_with(|| a.first().cmp(&b.first()))
    });
    let mut w = open_writer(path)?;
    for (new_id, (_, members)) in clusters.iter().enumerate() {
        for member in members.iter() {
            w.write_all(format!("{member}\t{new_id}\n").as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Partition> {
    let mut assignment: BTreeMap<String, u32> = BTreeMap::new();
    for (lineno, line) in text_lines(path)? {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 2 tab-separated columns, got {}", cols.len()),
            ));
        }
        let cluster: u32 = cols[1]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad cluster id `{}`", cols[1])))?;
        if assignment.insert(cols[0].to_string(), cluster).is_some() {
            return Err(Error::DuplicateUtterance(cols[0].to_string()));
        }
    }
    Ok(Partition::from_assignment(assignment))
}

pub fn write_graph(graph: &KnnGraph, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path, e);
    w.write_all(format!("knng {} {}\n", graph.nodes().len(), graph.edges().len()).as_bytes())
        .map_err(io_err)?;
    for id in graph.nodes() {
        w.write_all(format!("{id}\n").as_bytes()).map_err(io_err)?;
    }
    for &(a, b, weight) in graph.edges() {
        w.write_all(format!("{a} {b} {weight:.16e}\n").as_bytes())
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_graph(path: &Path) -> Result<KnnGraph> {
    let lines = text_lines(path)?;
    let mut iter = lines.into_iter();
    let (lineno, header) = iter
        .next()
        .ok_or_else(|| Error::parse(path, 0, "empty graph file"))?;
    let cols: Vec<&str> = header.split_whitespace().collect();
    if cols.len() != 3 || cols[0] != "knng" {
        return Err(Error::parse(path, lineno, "bad graph header"));
    }
    let n: usize = cols[1]
        .parse()
        .map_err(|_| Error::parse(path, lineno, "bad node count"))?;
    let m: usize = cols[2]
        .parse()
        .map_err(|_| Error::parse(path, lineno, "bad edge count"))?;

    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let (lineno, line) = iter
            .next()
            .ok_or_else(|| Error::parse(path, 0, "truncated node list"))?;
        if let Some(last) = nodes.last() {
            if *last >= line {
                return Err(Error::parse(path, lineno, "node ids not sorted and unique"));
            }
        }
        nodes.push(line);
    }

    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let (lineno, line) = iter
            .next()
            .ok_or_else(|| Error::parse(path, 0, "truncated edge list"))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(Error::parse(path, lineno, "bad edge line"));
        }
        let a: u32 = cols[0]
            .parse()
            .map_err(|_| Error::parse(path, lineno, "bad edge endpoint"))?;
        let b: u32 = cols[1]
            .parse()
            .map_err(|_| Error::parse(path, lineno, "bad edge endpoint"))?;
        let weight: f64 = cols[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, "bad edge weight"))?;
        if a >= b || b as usize >= nodes.len() {
            return Err(Error::parse(path, lineno, "edge endpoints out of order or range"));
        }
        edges.push((a, b, weight));
    }
    if iter.next().is_some() {
        return Err(Error::parse(path, 0, "trailing data after edge list"));
    }
    KnnGraph::from_parts(nodes, edges)
}

/// TSV `class  modal_k  dominant_fraction  count`, one row per class.
pub fn write_purity_report(report: &PurityReport, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    for row in &report.rows {
        w.write_all(
            format!(
                "{}\t{}\t{:.6}\t{}\n",
                row.class, row.modal_sub_center, row.dominant_fraction, row.member_count
            )
            .as_bytes(),
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_qmf_model(model: &QmfModel, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path, e);
    for weight in model.weights {
        w.write_all(format!("{weight:.16e}\n").as_bytes()).map_err(io_err)?;
    }
    w.write_all(format!("{:.16e}\n", model.bias).as_bytes()).map_err(io_err)?;
    w.write_all(format!("{:.16e} {:.16e}\n", model.snr_min, model.snr_max).as_bytes())
        .map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_qmf_model(path: &Path) -> Result<QmfModel> {
    let lines = text_lines(path)?;
    if lines.len() != 9 {
        return Err(Error::parse(
            path,
            0,
            format!("expected 9 lines, got {}", lines.len()),
        ));
    }
    let num = |lineno: usize, s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad number `{s}`")))
    };
    let mut weights = [0.0; 7];
    for (i, w) in weights.iter_mut().enumerate() {
        let (lineno, line) = &lines[i];
        *w = num(*lineno, line)?;
    }
    let (lineno, line) = &lines[7];
    let bias = num(*lineno, line)?;
    let (lineno, line) = &lines[8];
    let cols: Vec<&str> = line.split_whitespace().collect();
    if cols.len() != 2 {
        return Err(Error::parse(path, *lineno, "expected `snr_min snr_max`"));
    }
    let snr_min = num(*lineno, cols[0])?;
    let snr_max = num(*lineno, cols[1])?;
    QmfModel::new(weights, bias, snr_min, snr_max)
}
