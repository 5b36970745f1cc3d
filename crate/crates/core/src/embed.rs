//! Embedding value types and the vector math shared by every other module.
//!
//! Embeddings are stored raw (original magnitude) and normalized lazily at
//! scoring or clustering time; quality features need the pre-normalization
//! magnitude. All accumulation runs in double precision regardless of on-disk
//! precision.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// Ordered collection of (utterance id, raw d-dimensional vector) rows with a
/// shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>, // row-major, len = ids.len() * dim
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(EmbeddingSet {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        })
    }

    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut set = EmbeddingSet::new(dim)?;
        for (id, row) in rows {
            set.push(id.into(), &row)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, id: String, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateUtterance(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.row(i)))
    }

    /// A copy of this set with every row normalized to unit length.
    ///
    /// Row order and ids are preserved; a zero row is reported with its id.
    pub fn normalized(&self) -> Result<EmbeddingSet> {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, id) in self.ids.iter().enumerate() {
            let unit = l2_normalize(self.row(i))
                .map_err(|_| Error::degenerate_ctx(format!("utterance `{id}`")))?;
            data.extend_from_slice(&unit);
        }
        Ok(EmbeddingSet {
            dim: self.dim,
            ids: self.ids.clone(),
            index: self.index.clone(),
            data,
        })
    }

    /// Restriction of this set to ids accepted by `keep`, preserving order.
    pub fn filtered<F: Fn(&str) -> bool>(&self, keep: F) -> Result<EmbeddingSet> {
        let mut out = EmbeddingSet::new(self.dim)?;
        for (i, id) in self.ids.iter().enumerate() {
            if keep(id) {
                out.push(id.clone(), self.row(i))?;
            }
        }
        Ok(out)
    }
}

/// Per-utterance side information consumed by filtering and calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMetadata {
    /// Duration in seconds, strictly positive.
    pub duration_s: f64,
    /// Signal-to-noise ratio in dB; may be negative.
    pub snr_db: f64,
    pub speaker: Option<String>,
}

/// One metadata record per utterance id, deterministically ordered.
pub type MetadataMap = BTreeMap<String, UtteranceMetadata>;

/// Euclidean norm.
pub fn magnitude(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale `v` to unit Euclidean norm, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = magnitude(v);
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::degenerate());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Cosine similarity, clamped to `[-1, 1]` to absorb rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (magnitude(a), magnitude(b));
    if na <= 0.0 || nb <= 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::degenerate());
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of two already unit-normalized vectors.
pub(crate) fn unit_cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

/// Arithmetic mean of unit vectors, re-normalized to unit length.
///
/// Errors on an empty input and on an (antipodal) zero mean.
pub fn centroid<'a, I>(rows: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = rows.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::invalid("centroid of empty set"))?;
    let mut sum = first.to_vec();
    let mut count = 1usize;
    for row in iter {
        if row.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                got: row.len(),
            });
        }
        for (acc, x) in sum.iter_mut().zip(row) {
            *acc += x;
        }
        count += 1;
    }
    let n = count as f64;
    for acc in sum.iter_mut() {
        *acc /= n;
    }
    l2_normalize(&sum)
}
