//! Evaluation metrics: pairwise group scores, VALSE-style foil precision,
//! retrieval recall@K, the equivariance score and histogram summaries.
//!
//! All win conditions are strict; a tie is a loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{BatchSimilarities, SimilarityGrid};

/// Default decision threshold for [`valse_metrics`] on softmax-normalized scores.
pub const DEFAULT_VALSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePoints {
    pub text: u8,
    pub image: u8,
    pub group: u8,
}

impl SamplePoints {
    pub fn of(g: &SimilarityGrid) -> Self {
        let text = g.s11 > g.s12 && g.s22 > g.s21;
        let image = g.s11 > g.s21 && g.s22 > g.s12;
        Self {
            text: text as u8,
            image: image as u8,
            group: (text && image) as u8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetricsReport {
    pub text_score: f64,
    pub image_score: f64,
    pub group_score: f64,
    pub n_samples: usize,
    pub per_sample: Vec<SamplePoints>,
}

pub fn group_metrics(grids: &[SimilarityGrid]) -> Result<GroupMetricsReport> {
    if grids.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let per_sample: Vec<SamplePoints> = grids.iter().map(SamplePoints::of).collect();
    let n = grids.len();
    let mean = |f: fn(&SamplePoints) -> u8| {
        per_sample.iter().map(|p| f(p) as usize).sum::<usize>() as f64 / n as f64
    };
    Ok(GroupMetricsReport {
        text_score: mean(|p| p.text),
        image_score: mean(|p| p.image),
        group_score: mean(|p| p.group),
        n_samples: n,
        per_sample,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValseReport {
    pub acc: f64,
    pub p_c: f64,
    pub p_f: f64,
    pub min_pc_pf: f64,
    pub threshold: f64,
}

/// A correct pair is identified when its score exceeds `threshold`, a foil
/// when its score falls below it.
pub fn valse_metrics(correct: &[f64], foil: &[f64], threshold: f64) -> Result<ValseReport> {
    if correct.len() != foil.len() {
        return Err(Error::LengthMismatch {
            left: correct.len(),
            right: foil.len(),
        });
    }
    if correct.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let n = correct.len() as f64;
    let hits_c = correct.iter().filter(|&&s| s > threshold).count();
    let hits_f = foil.iter().filter(|&&s| s < threshold).count();
    let p_c = hits_c as f64 / n;
    let p_f = hits_f as f64 / n;
    Ok(ValseReport {
        acc: (hits_c + hits_f) as f64 / (2.0 * n),
        p_c,
        p_f,
        min_pc_pf: p_c.min(p_f),
        threshold,
    })
}

/// Recall@K in both retrieval directions, keyed by K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Query image (row), retrieve its text among all columns.
    pub image_to_text: BTreeMap<usize, f64>,
    /// Query text (column), retrieve its image among all rows.
    pub text_to_image: BTreeMap<usize, f64>,
}

/// Zero-based rank of `scores[target]`: strictly larger scores rank above,
/// equal scores at lower indices rank above.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(idx, &s)| s > t || (s == t && idx < target))
        .count()
}

pub fn recall_at_k(m: &BatchSimilarities, ks: &[usize]) -> Result<RecallReport> {
    let n = m.n();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::BadK { k, n });
    }
    let row_ranks: Vec<usize> = (0..n).map(|i| rank_of(m.row(i), i)).collect();
    let col_ranks: Vec<usize> = (0..n).map(|j| rank_of(&m.column(j), j)).collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(RecallReport {
        image_to_text: ks.iter().map(|&k| (k, recall(&row_ranks, k))).collect(),
        text_to_image: ks.iter().map(|&k| (k, recall(&col_ranks, k))).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceScore {
    /// `|(s11 - s12) - (s22 - s21)|`: score change under the text edit.
    pub text_direction: f64,
    /// `|(s11 - s21) - (s22 - s12)|`: score change under the image edit.
    pub image_direction: f64,
    pub combined: f64,
}

pub fn equivariance_score(g: &SimilarityGrid) -> EquivarianceScore {
    let text_direction = ((g.s11 - g.s12) - (g.s22 - g.s21)).abs();
    let image_direction = ((g.s11 - g.s21) - (g.s22 - g.s12)).abs();
    EquivarianceScore {
        text_direction,
        image_direction,
        combined: text_direction + image_direction,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation of all values.
    pub std: f64,
}

pub fn histogram(values: &[f64], n_bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyValues);
    }
    if n_bins == 0 {
        return Err(Error::InvalidParameter {
            name: "n_bins",
            reason: "must be >= 1".into(),
        });
    }
    let (lo, hi) = match range {
        Some((lo, hi)) if lo <= hi && lo.is_finite() && hi.is_finite() => (lo, hi),
        Some((lo, hi)) => {
            return Err(Error::InvalidParameter {
                name: "range",
                reason: format!("[{lo}, {hi}] is not a finite interval"),
            })
        }
        None => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }),
    };
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|b| if b == n_bins { hi } else { lo + b as f64 * width })
        .collect();
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let mut idx = if width > 0.0 {
            (((v - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        // settle rounding at bin boundaries against the published edges
        while idx > 0 && v < edges[idx] {
            idx -= 1;
        }
        while idx + 1 < n_bins && v >= edges[idx + 1] {
            idx += 1;
        }
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Histogram {
        edges,
        counts,
        mean,
        std: var.sqrt(),
    })
}
