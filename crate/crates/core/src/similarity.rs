//! Embedding vectors, cosine similarity and the batch score matrix.
//!
//! Every loss and metric in the crate bottoms out in a [`SimilarityGrid`]:
//! the four cross scores between two matched image-text pairs. Training
//! batches produce a full [`BatchSimilarities`] matrix from which grids are
//! extracted pairwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for equality checks on scores.
pub const EQ_TOL: f64 = 1e-9;
/// Norms below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A finite, non-empty feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbVector(Vec<f64>);

impl EmbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for EmbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbVector> for Vec<f64> {
    fn from(v: EmbVector) -> Self {
        v.0
    }
}

/// The four scores `s_ij = sim(image_i, text_j)` for two matched pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGrid {
    pub s11: f64,
    pub s12: f64,
    pub s21: f64,
    pub s22: f64,
    pub normalized: bool,
}

impl SimilarityGrid {
    pub fn new(s11: f64, s12: f64, s21: f64, s22: f64) -> Self {
        Self {
            s11,
            s12,
            s21,
            s22,
            normalized: false,
        }
    }

    /// Swap which matched pair is called "pair 1".
    pub fn relabeled(&self) -> Self {
        Self {
            s11: self.s22,
            s12: self.s21,
            s21: self.s12,
            s22: self.s11,
            normalized: self.normalized,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            s11: f(self.s11),
            s12: f(self.s12),
            s21: f(self.s21),
            s22: f(self.s22),
            normalized: self.normalized,
        }
    }

    pub fn is_valid(&self) -> bool {
        let all = [self.s11, self.s12, self.s21, self.s22];
        all.iter().all(|s| s.is_finite())
            && (!self.normalized || all.iter().all(|s| (0.0..=1.0).contains(s)))
    }
}

/// Square score matrix over a batch; rows are images, columns are texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSimilarities {
    scores: Vec<f64>,
    n: usize,
    temperature: f64,
    normalized: bool,
}

impl BatchSimilarities {
    /// Wrap a row-major `n x n` matrix of raw scores.
    pub fn from_rows(rows: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        check_temperature(temperature)?;
        let mut scores = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            scores.extend(row);
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix"));
        }
        Ok(Self {
            scores,
            n,
            temperature,
            normalized: false,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n..(i + 1) * self.n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    /// Row-major view of all scores.
    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.scores.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// Apply `f` to every entry, keeping the provenance flags.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            scores: self.scores.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Reorder rows and columns: entry `(a, b)` of the result is entry
    /// `(perm[a], perm[b])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut scores = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                scores[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        Self {
            scores,
            ..self.clone()
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::BadTemperature(t))
    }
}

pub fn cosine_similarity(u: &EmbVector, v: &EmbVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    for norm in [nu, nv] {
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateVector { norm });
        }
    }
    Ok(u.dot(v) / (nu * nv))
}

/// `scores[i][j] = cos(images[i], texts[j]) / temperature`.
pub fn batch_similarity(
    images: &[EmbVector],
    texts: &[EmbVector],
    temperature: f64,
) -> Result<BatchSimilarities> {
    if images.len() != texts.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            texts: texts.len(),
        });
    }
    let n = images.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    check_temperature(temperature)?;
    let dim = images[0].dim();
    let mut scores = Vec::with_capacity(n * n);
    for img in images {
        if img.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: img.dim(),
            });
        }
        for txt in texts {
            scores.push(cosine_similarity(img, txt)? / temperature);
        }
    }
    Ok(BatchSimilarities {
        scores,
        n,
        temperature,
        normalized: false,
    })
}

/// Numerically stable softmax of a single row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &BatchSimilarities) -> Result<BatchSimilarities> {
    if m.normalized {
        return Err(Error::AlreadyNormalized);
    }
    let scores = m.scores.chunks(m.n).flat_map(softmax).collect();
    Ok(BatchSimilarities {
        scores,
        normalized: true,
        ..m.clone()
    })
}

/// Extract the 2x2 block pairing samples `i` (pair 1) and `j` (pair 2).
pub fn grid_from_matrix(m: &BatchSimilarities, i: usize, j: usize) -> Result<SimilarityGrid> {
    for index in [i, j] {
        if index >= m.n {
            return Err(Error::IndexOutOfRange { index, n: m.n });
        }
    }
    if i == j {
        return Err(Error::SamePairIndex(i));
    }
    Ok(SimilarityGrid {
        s11: m.get(i, i),
        s12: m.get(i, j),
        s21: m.get(j, i),
        s22: m.get(j, j),
        normalized: m.normalized,
    })
}
