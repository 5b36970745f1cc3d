//! Pseudo-label clustering: threshold determination from a labeled subset,
//! duration filtering, KNN graph construction, map-equation clustering,
//! outlier cleaning, and progressive centroid merging.
//!
//! The similarity used everywhere is the cosine of length-normalized
//! embeddings (dot product of unit vectors, clamped to `[-1, 1]`).

mod infomap;

pub use infomap::{infomap, map_equation, InfomapConfig, InfomapResult};

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rayon::prelude::*;

use crate::embed::{centroid, unit_cosine, EmbeddingSet, MetadataMap};
use crate::error::{Error, Result};

/// Thresholds derived from the labeled target-domain subset.
///
/// `t1` prunes KNN edges, `t2` removes within-class outliers, `t3` limits
/// class merging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

/// Assignment of utterance ids to cluster labels.
///
/// Labels are opaque integers; members of each cluster are kept sorted so
/// every traversal is deterministic. Cluster centroids are computed by the
/// operations that need them (cleaning, merging, purification) from the
/// embedding set they are given.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignment: BTreeMap<String, u32>,
    clusters: BTreeMap<u32, Vec<String>>,
}

impl Partition {
    pub fn from_assignment(assignment: BTreeMap<String, u32>) -> Self {
        let mut clusters: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for (id, &label) in &assignment {
            clusters.entry(label).or_default().push(id.clone());
        }
        // BTreeMap iteration already yields members in sorted order.
        Partition {
            assignment,
            clusters,
        }
    }

    pub(crate) fn from_clusters(clusters: BTreeMap<u32, Vec<String>>) -> Self {
        let mut assignment = BTreeMap::new();
        let mut sorted = clusters;
        for (label, members) in sorted.iter_mut() {
            members.sort_unstable();
            for id in members.iter() {
                assignment.insert(id.clone(), *label);
            }
        }
        Partition {
            assignment,
            clusters: sorted,
        }
    }

    pub fn clusters(&self) -> impl Iterator<Item = (&u32, &Vec<String>)> {
        self.clusters.iter()
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.clusters.keys().copied()
    }

    pub fn members(&self, label: u32) -> Option<&[String]> {
        self.clusters.get(&label).map(|m| m.as_slice())
    }

    pub fn label_of(&self, id: &str) -> Option<u32> {
        self.assignment.get(id).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<String, u32> {
        &self.assignment
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn total_assigned(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Undirected weighted graph over utterance ids.
///
/// Nodes are sorted; at most one edge per unordered pair `(a, b)` with
/// `a < b`; weights are cosine similarities in `[-1, 1]`; no self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    nodes: Vec<String>,
    edges: Vec<(u32, u32, f64)>,
}

impl KnnGraph {
    pub(crate) fn from_parts(nodes: Vec<String>, mut edges: Vec<(u32, u32, f64)>) -> Result<Self> {
        for w in nodes.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("graph nodes must be sorted and unique"));
            }
        }
        edges.sort_unstable_by_key(|&(a, b, _)| (a, b));
        for &(a, b, weight) in &edges {
            if a >= b || b as usize >= nodes.len() {
                return Err(Error::invalid("graph edge endpoints out of order or range"));
            }
            if !weight.is_finite() {
                return Err(Error::invalid("graph edge weight not finite"));
            }
        }
        for w in edges.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::invalid("duplicate graph edge"));
            }
        }
        Ok(KnnGraph { nodes, edges })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Neighbor lists indexed like `nodes()`, each sorted by neighbor index.
    pub fn adjacency(&self) -> Vec<Vec<(u32, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b, w) in &self.edges {
            adj[a as usize].push((b, w));
            adj[b as usize].push((a, w));
        }
        for list in adj.iter_mut() {
            list.sort_unstable_by_key(|&(j, _)| j);
        }
        adj
    }
}

/// Rows of `emb` grouped by speaker label, with ids in sorted (row) order.
/// Every utterance must carry a label.
fn rows_by_speaker(
    emb: &EmbeddingSet,
    meta: &MetadataMap,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, id) in emb.ids().iter().enumerate() {
        let speaker = meta
            .get(id)
            .and_then(|m| m.speaker.clone())
            .ok_or_else(|| Error::invalid(format!("utterance `{id}` has no speaker label")))?;
        groups.entry(speaker).or_default().push(i);
    }
    Ok(groups)
}

/// Highest cosine similarity between any two differently-labeled utterances.
///
/// Equivalent to scanning each embedding's neighbors in descending-similarity
/// order and recording the first one with a different label: that first
/// record is exactly the maximum cross-label similarity for the row.
pub fn determine_t1(emb: &EmbeddingSet, meta: &MetadataMap) -> Result<f64> {
    let groups = rows_by_speaker(emb, meta)?;
    if groups.len() < 2 {
        return Err(Error::invalid(
            "threshold t1 needs at least two distinct speakers",
        ));
    }
    let unit = emb.normalized()?;
    let mut label_of = vec![0usize; emb.len()];
    for (g, (_, rows)) in groups.iter().enumerate() {
        for &i in rows {
            label_of[i] = g;
        }
    }
    let best = (0..unit.len())
        .into_par_iter()
        .map(|i| {
            let mut row_best = f64::NEG_INFINITY;
            let a = unit.row(i);
            for j in 0..unit.len() {
                if label_of[j] != label_of[i] {
                    let s = unit_cosine(a, unit.row(j));
                    if s > row_best {
                        row_best = s;
                    }
                }
            }
            row_best
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    Ok(best)
}

/// Max over classes of the minimum member-to-centroid similarity.
pub fn determine_t2(emb: &EmbeddingSet, meta: &MetadataMap) -> Result<f64> {
    let groups = rows_by_speaker(emb, meta)?;
    if groups.is_empty() {
        return Err(Error::invalid("threshold t2 needs at least one utterance"));
    }
    let unit = emb.normalized()?;
    let mut best = f64::NEG_INFINITY;
    for (speaker, rows) in &groups {
        let center = centroid(rows.iter().map(|&i| unit.row(i)))
            .map_err(|_| Error::degenerate_ctx(format!("centroid of speaker `{speaker}`")))?;
        let class_min = rows
            .iter()
            .map(|&i| unit_cosine(unit.row(i), &center))
            .fold(f64::INFINITY, f64::min);
        best = best.max(class_min);
    }
    Ok(best)
}

/// Max pairwise similarity between class centroids.
pub fn determine_t3(emb: &EmbeddingSet, meta: &MetadataMap) -> Result<f64> {
    let groups = rows_by_speaker(emb, meta)?;
    if groups.len() < 2 {
        return Err(Error::invalid(
            "threshold t3 needs at least two distinct speakers",
        ));
    }
    let unit = emb.normalized()?;
    let mut centers = Vec::with_capacity(groups.len());
    for (speaker, rows) in &groups {
        let center = centroid(rows.iter().map(|&i| unit.row(i)))
            .map_err(|_| Error::degenerate_ctx(format!("centroid of speaker `{speaker}`")))?;
        centers.push(center);
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.max(unit_cosine(&centers[i], &centers[j]));
        }
    }
    Ok(best)
}

pub fn determine_thresholds(emb: &EmbeddingSet, meta: &MetadataMap) -> Result<Thresholds> {
    Ok(Thresholds {
        t1: determine_t1(emb, meta)?,
        t2: determine_t2(emb, meta)?,
        t3: determine_t3(emb, meta)?,
    })
}

/// Ids whose duration strictly exceeds `min_duration` seconds.
pub fn filter_short(meta: &MetadataMap, min_duration: f64) -> BTreeSet<String> {
    meta.iter()
        .filter(|(_, m)| m.duration_s > min_duration)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Union-symmetrized K-nearest-neighbor graph with edges below `t1` removed.
///
/// Directed candidates `i -> j` take the `k` most similar neighbors of `i`
/// (ties broken by smaller id); an undirected edge is kept when it appears in
/// either direction and its weight is at least `t1`.
pub fn build_knn_graph(emb: &EmbeddingSet, k: usize, t1: f64) -> Result<KnnGraph> {
    if k == 0 {
        return Err(Error::invalid("knn k must be at least 1"));
    }
    if emb.len() < 2 {
        return Err(Error::invalid("knn graph needs at least 2 utterances"));
    }
    let mut order: Vec<usize> = (0..emb.len()).collect();
    order.sort_unstable_by(|&a, &b| emb.ids()[a].cmp(&emb.ids()[b]));
    let nodes: Vec<String> = order.iter().map(|&i| emb.ids()[i].clone()).collect();

    let unit = emb.normalized()?;
    let rows: Vec<&[f64]> = order.iter().map(|&i| unit.row(i)).collect();
    let n = nodes.len();
    let take = k.min(n - 1);

    let candidate_lists: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(u32, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j as u32, unit_cosine(rows[i], rows[j])))
                .collect();
            // Higher similarity first; equal similarities resolved toward the
            // smaller (id-sorted) index.
            let by_rank = |a: &(u32, f64), b: &(u32, f64)| {
                b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
            };
            if take < sims.len() {
                sims.select_nth_unstable_by(take - 1, by_rank);
                sims.truncate(take);
            }
            sims.sort_unstable_by(by_rank);
            sims
        })
        .collect();

    let mut union: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (i, list) in candidate_lists.iter().enumerate() {
        for &(j, w) in list {
            let key = (i.min(j as usize) as u32, i.max(j as usize) as u32);
            union.entry(key).or_insert(w);
        }
    }
    let edges: Vec<(u32, u32, f64)> = union
        .into_iter()
        .filter(|&(_, w)| w >= t1)
        .map(|((a, b), w)| (a, b, w))
        .collect();
    KnnGraph::from_parts(nodes, edges)
}

/// One-pass outlier removal: per cluster, drop members whose similarity to
/// the pre-cleaning centroid is below `t2`, then drop clusters smaller than
/// `min_size`. Dropped utterances become unassigned.
pub fn clean_clusters(
    partition: &Partition,
    emb: &EmbeddingSet,
    t2: f64,
    min_size: usize,
) -> Result<Partition> {
    let unit = emb.normalized()?;
    let mut kept: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for (&label, members) in partition.clusters() {
        let mut rows = Vec::with_capacity(members.len());
        for id in members {
            let i = unit
                .position(id)
                .ok_or_else(|| Error::UnknownUtterance(id.clone()))?;
            rows.push(i);
        }
        // A degenerate (zero-mean) centroid leaves no way to score cohesion;
        // the whole cluster is treated as outliers.
        let center = match centroid(rows.iter().map(|&i| unit.row(i))) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let survivors: Vec<String> = members
            .iter()
            .zip(&rows)
            .filter(|(_, &i)| unit_cosine(unit.row(i), &center) >= t2)
            .map(|(id, _)| id.clone())
            .collect();
        if survivors.len() >= min_size {
            kept.insert(label, survivors);
        }
    }
    Ok(Partition::from_clusters(kept))
}

#[derive(Debug)]
struct MergeCandidate {
    cos: f64,
    a: u32,
    b: u32,
    ver_a: u64,
    ver_b: u64,
}

impl PartialEq for MergeCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for MergeCandidate {}
impl PartialOrd for MergeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for MergeCandidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap: highest cosine first, ties to the smallest label pair.
        self.cos
            .total_cmp(&other.cos)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

/// Greedy agglomeration: repeatedly merge the cluster pair with the highest
/// centroid similarity until every pairwise similarity falls below `t3`.
/// Centroids are recomputed from the merged member set after each merge.
pub fn merge_clusters(partition: &Partition, emb: &EmbeddingSet, t3: f64) -> Result<Partition> {
    let unit = emb.normalized()?;

    let compute_center = |members: &[String]| -> Result<Vec<f64>> {
        let mut rows = Vec::with_capacity(members.len());
        for id in members {
            let i = unit
                .position(id)
                .ok_or_else(|| Error::UnknownUtterance(id.clone()))?;
            rows.push(unit.row(i));
        }
        centroid(rows)
    };

    let mut members: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    let mut centers: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut versions: BTreeMap<u32, u64> = BTreeMap::new();
    for (&label, ids) in partition.clusters() {
        centers.insert(label, compute_center(ids)?);
        members.insert(label, ids.clone());
        versions.insert(label, 0);
    }

    let labels: Vec<u32> = members.keys().copied().collect();
    let mut heap = BinaryHeap::new();
    for (i, &a) in labels.iter().enumerate() {
        for &b in &labels[i + 1..] {
            heap.push(MergeCandidate {
                cos: unit_cosine(&centers[&a], &centers[&b]),
                a,
                b,
                ver_a: 0,
                ver_b: 0,
            });
        }
    }

    while let Some(top) = heap.pop() {
        let fresh = versions.get(&top.a) == Some(&top.ver_a)
            && versions.get(&top.b) == Some(&top.ver_b);
        if !fresh {
            continue;
        }
        if top.cos < t3 {
            break;
        }
        let absorbed = members.remove(&top.b).expect("fresh candidate");
        versions.remove(&top.b);
        centers.remove(&top.b);
        let merged = members.get_mut(&top.a).expect("fresh candidate");
        merged.extend(absorbed);
        merged.sort_unstable();
        let center = compute_center(merged)?;
        centers.insert(top.a, center);
        let version = versions.get_mut(&top.a).expect("fresh candidate");
        *version += 1;
        let ver_a = *version;
        for (&other, other_center) in &centers {
            if other == top.a {
                continue;
            }
            let (a, b) = (top.a.min(other), top.a.max(other));
            heap.push(MergeCandidate {
                cos: unit_cosine(&centers[&top.a], other_center),
                a,
                b,
                ver_a: if a == top.a { ver_a } else { versions[&other] },
                ver_b: if b == top.a { ver_a } else { versions[&other] },
            });
        }
    }

    Ok(Partition::from_clusters(members))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::UtteranceMetadata;

    fn meta_with_speakers(pairs: &[(&str, &str)]) -> MetadataMap {
        pairs
            .iter()
            .map(|(id, spk)| {
                (
                    id.to_string(),
                    UtteranceMetadata {
                        duration_s: 5.0,
                        snr_db: 10.0,
                        speaker: Some(spk.to_string()),
                    },
                )
            })
            .collect()
    }

    fn unit_at(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn t1_orthogonal_speakers() {
        let emb = EmbeddingSet::from_rows(
            2,
            vec![
                ("a1", vec![1.0, 0.0]),
                ("a2", vec![1.0, 0.0]),
                ("b1", vec![0.0, 1.0]),
                ("b2", vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let meta = meta_with_speakers(&[("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")]);
        assert_eq!(determine_t1(&emb, &meta).unwrap(), 0.0);
    }

    #[test]
    fn t1_single_speaker_is_error() {
        let emb =
            EmbeddingSet::from_rows(2, vec![("a1", vec![1.0, 0.0]), ("a2", vec![0.0, 1.0])])
                .unwrap();
        let meta = meta_with_speakers(&[("a1", "A"), ("a2", "A")]);
        assert!(determine_t1(&emb, &meta).is_err());
    }

    #[test]
    fn t2_identical_members_give_one() {
        let emb = EmbeddingSet::from_rows(
            2,
            vec![("a1", vec![1.0, 0.0]), ("a2", vec![1.0, 0.0]), ("b1", vec![0.0, 1.0])],
        )
        .unwrap();
        let meta = meta_with_speakers(&[("a1", "A"), ("a2", "A"), ("b1", "B")]);
        let t2 = determine_t2(&emb, &meta).unwrap();
        assert!((t2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t2_takes_tightest_class() {
        // Class A members at +/- beta_a around their centroid (cos 0.9), class
        // B at +/- beta_b (cos 0.4): t2 must report the tight class.
        let beta_a = 0.9f64.acos();
        let beta_b = 0.4f64.acos();
        let emb = EmbeddingSet::from_rows(
            2,
            vec![
                ("a1", unit_at(beta_a)),
                ("a2", unit_at(-beta_a)),
                ("b1", unit_at(std::f64::consts::PI / 2.0 + beta_b)),
                ("b2", unit_at(std::f64::consts::PI / 2.0 - beta_b)),
            ],
        )
        .unwrap();
        let meta = meta_with_speakers(&[("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")]);
        let t2 = determine_t2(&emb, &meta).unwrap();
        assert!((t2 - 0.9).abs() < 1e-12, "t2 = {t2}");
    }

    #[test]
    fn t2_single_member_class_is_one() {
        let emb = EmbeddingSet::from_rows(2, vec![("a1", vec![3.0, 4.0])]).unwrap();
        let meta = meta_with_speakers(&[("a1", "A")]);
        let t2 = determine_t2(&emb, &meta).unwrap();
        assert!((t2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t3_constructed_max_pairwise() {
        // Three singleton classes at angles 0, acos(0.35), and -80deg: the
        // largest pairwise centroid cosine is 0.35.
        let b = 0.35f64.acos();
        let c = -80.0f64.to_radians();
        let emb = EmbeddingSet::from_rows(
            2,
            vec![("a1", unit_at(0.0)), ("b1", unit_at(b)), ("c1", unit_at(c))],
        )
        .unwrap();
        let meta = meta_with_speakers(&[("a1", "A"), ("b1", "B"), ("c1", "C")]);
        let t3 = determine_t3(&emb, &meta).unwrap();
        assert!((t3 - 0.35).abs() < 1e-12, "t3 = {t3}");
    }

    #[test]
    fn t3_orthogonal_and_duplicate_centroids() {
        let emb =
            EmbeddingSet::from_rows(2, vec![("a1", vec![1.0, 0.0]), ("b1", vec![0.0, 1.0])])
                .unwrap();
        let meta = meta_with_speakers(&[("a1", "A"), ("b1", "B")]);
        assert_eq!(determine_t3(&emb, &meta).unwrap(), 0.0);

        let emb = EmbeddingSet::from_rows(2, vec![("a1", vec![1.0, 0.0]), ("b1", vec![2.0, 0.0])])
            .unwrap();
        let meta = meta_with_speakers(&[("a1", "A"), ("b1", "B")]);
        assert_eq!(determine_t3(&emb, &meta).unwrap(), 1.0);

        let emb = EmbeddingSet::from_rows(2, vec![("a1", vec![1.0, 0.0])]).unwrap();
        let meta = meta_with_speakers(&[("a1", "A")]);
        assert!(determine_t3(&emb, &meta).is_err());
    }

    #[test]
    fn filter_short_is_strict() {
        let mut meta = MetadataMap::new();
        for (id, dur) in [("a", 1.0), ("b", 1.01), ("c", 0.2)] {
            meta.insert(
                id.to_string(),
                UtteranceMetadata {
                    duration_s: dur,
                    snr_db: 0.0,
                    speaker: None,
                },
            );
        }
        let kept = filter_short(&meta, 1.0);
        assert!(!kept.contains("a"));
        assert!(kept.contains("b"));
        assert!(!kept.contains("c"));
        assert!(filter_short(&MetadataMap::new(), 1.0).is_empty());
    }

    #[test]
    fn knn_identical_vectors_form_triangle() {
        let emb = EmbeddingSet::from_rows(
            2,
            vec![("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0]), ("c", vec![2.0, 0.0])],
        )
        .unwrap();
        let g = build_knn_graph(&emb, 2, 0.5).unwrap();
        assert_eq!(g.edges().len(), 3);
        assert!(g.edges().iter().all(|&(_, _, w)| w == 1.0));
    }

    #[test]
    fn knn_orthogonal_pairs_stay_disjoint() {
        let emb = EmbeddingSet::from_rows(
            2,
            vec![
                ("a1", vec![1.0, 0.0]),
                ("a2", vec![1.0, 0.0]),
                ("b1", vec![0.0, 1.0]),
                ("b2", vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let g = build_knn_graph(&emb, 3, 0.5).unwrap();
        assert_eq!(g.edges().len(), 2);
        let nodes = g.nodes();
        for &(a, b, w) in g.edges() {
            assert_eq!(w, 1.0);
            assert_eq!(nodes[a as usize].as_bytes()[0], nodes[b as usize].as_bytes()[0]);
        }
    }

    #[test]
    fn knn_row_order_does_not_matter() {
        let rows = vec![
            ("u3", vec![0.9, 0.1, 0.0]),
            ("u1", vec![1.0, 0.0, 0.0]),
            ("u4", vec![0.0, 1.0, 0.1]),
            ("u2", vec![0.0, 0.9, 0.0]),
        ];
        let emb_a = EmbeddingSet::from_rows(3, rows.clone()).unwrap();
        let mut rev = rows;
        rev.reverse();
        let emb_b = EmbeddingSet::from_rows(3, rev).unwrap();
        let ga = build_knn_graph(&emb_a, 2, 0.0).unwrap();
        let gb = build_knn_graph(&emb_b, 2, 0.0).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn clean_drops_small_clusters_entirely() {
        let ids: Vec<String> = (0..9).map(|i| format!("u{i}")).collect();
        let emb = EmbeddingSet::from_rows(
            2,
            ids.iter().map(|id| (id.clone(), vec![1.0, 0.0])),
        )
        .unwrap();
        let assignment: BTreeMap<String, u32> = ids.iter().map(|id| (id.clone(), 0)).collect();
        let p = Partition::from_assignment(assignment);
        let cleaned = clean_clusters(&p, &emb, 0.5, 10).unwrap();
        assert_eq!(cleaned.cluster_count(), 0);
    }

    #[test]
    fn clean_removes_outliers_keeps_cluster() {
        // 10 tight members plus 2 outliers below t2.
        let mut rows: Vec<(String, Vec<f64>)> = (0..10)
            .map(|i| (format!("m{i}"), vec![1.0, 0.001 * i as f64]))
            .collect();
        rows.push(("out1".to_string(), vec![0.0, 1.0]));
        rows.push(("out2".to_string(), vec![0.0, -1.0]));
        let emb = EmbeddingSet::from_rows(2, rows.clone()).unwrap();
        let assignment: BTreeMap<String, u32> =
            rows.iter().map(|(id, _)| (id.clone(), 7)).collect();
        let p = Partition::from_assignment(assignment);
        let cleaned = clean_clusters(&p, &emb, 0.9, 10).unwrap();
        assert_eq!(cleaned.cluster_count(), 1);
        let members = cleaned.members(7).unwrap();
        assert_eq!(members.len(), 10);
        assert!(members.iter().all(|id| id.starts_with('m')));
    }

    #[test]
    fn clean_leaves_good_clusters_untouched() {
        let rows: Vec<(String, Vec<f64>)> = (0..12)
            .map(|i| (format!("m{i:02}"), vec![1.0, 0.0001 * i as f64]))
            .collect();
        let emb = EmbeddingSet::from_rows(2, rows.clone()).unwrap();
        let assignment: BTreeMap<String, u32> =
            rows.iter().map(|(id, _)| (id.clone(), 0)).collect();
        let p = Partition::from_assignment(assignment);
        let cleaned = clean_clusters(&p, &emb, 0.9, 10).unwrap();
        assert_eq!(cleaned, p);
    }

    #[test]
    fn merge_identical_centroids() {
        let emb = EmbeddingSet::from_rows(
            2,
            vec![("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0])],
        )
        .unwrap();
        let assignment: BTreeMap<String, u32> =
            [("a".to_string(), 0), ("b".to_string(), 1)].into();
        let merged = merge_clusters(&Partition::from_assignment(assignment), &emb, 0.9).unwrap();
        assert_eq!(merged.cluster_count(), 1);
        assert_eq!(merged.members(0).unwrap().len(), 2);
    }

    #[test]
    fn merge_exactly_one_pair() {
        // Pairwise centroid cosines (0.95, ~0.3, ~0.3): only one merge at
        // t3 = 0.5, and the merged centroid must stay below t3 vs the third.
        let close = 0.95f64.acos();
        let far = 75f64.to_radians();
        let emb = EmbeddingSet::from_rows(
            2,
            vec![
                ("a", unit_at(0.0)),
                ("b", unit_at(close)),
                ("c", unit_at(-far)),
            ],
        )
        .unwrap();
        let assignment: BTreeMap<String, u32> =
            [("a".to_string(), 0), ("b".to_string(), 1), ("c".to_string(), 2)].into();
        let merged = merge_clusters(&Partition::from_assignment(assignment), &emb, 0.5).unwrap();
        assert_eq!(merged.cluster_count(), 2);
        assert_eq!(merged.label_of("a"), merged.label_of("b"));
        assert_ne!(merged.label_of("a"), merged.label_of("c"));
    }

    #[test]
    fn merge_untouched_below_threshold() {
        let emb = EmbeddingSet::from_rows(
            2,
            vec![("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])],
        )
        .unwrap();
        let assignment: BTreeMap<String, u32> =
            [("a".to_string(), 3), ("b".to_string(), 8)].into();
        let p = Partition::from_assignment(assignment);
        let merged = merge_clusters(&p, &emb, 0.5).unwrap();
        assert_eq!(merged, p);
    }
}
