//! Retrieval objective and the equivariance regularizers.
//!
//! The retrieval term is the symmetric image-text contrastive loss. The
//! equivariance term hinges squared deviations from two families of score
//! identities on every unordered pair of batch samples:
//!
//! * v1 (distant pairs): `s12 = s21`
//! * v2 (close pairs):   `s11 - s12 = s22 - s21` and `s11 - s21 = s22 - s12`
//!
//! Each identity contributes `max(deviation^2 - alpha, 0)`. Pairs are split
//! into close and distant by in-batch top-k similarity.
//!
//! Alongside each loss this module exposes its gradient with respect to the
//! score matrix; the model module chains those into parameter gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{grid_from_matrix, log_sum_exp, softmax, softmax_rows, BatchSimilarities, SimilarityGrid};

/// Default singularity guard for [`equivariance_ratio`].
pub const DEFAULT_RATIO_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqSimMode {
    /// v2 on close pairs, v1 on distant pairs.
    Hybrid,
    V1All,
    V2All,
    V2CloseOnly,
    Off,
}

impl EqSimMode {
    pub const ALL: [EqSimMode; 5] = [
        EqSimMode::Off,
        EqSimMode::Hybrid,
        EqSimMode::V1All,
        EqSimMode::V2All,
        EqSimMode::V2CloseOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EqSimMode::Hybrid => "hybrid",
            EqSimMode::V1All => "v1_all",
            EqSimMode::V2All => "v2_all",
            EqSimMode::V2CloseOnly => "v2_close_only",
            EqSimMode::Off => "off",
        }
    }
}

impl fmt::Display for EqSimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EqSimMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        EqSimMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown eqsim mode {s:?} (expected off|hybrid|v1_all|v2_all|v2_close_only)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EqSimConfig {
    /// Hinge margin on each squared deviation.
    pub alpha: f64,
    /// Weight of the equivariance term in the total loss.
    pub beta: f64,
    /// Per-anchor number of top-scoring partners regarded as close.
    pub k_close: usize,
    pub use_softmax: bool,
    pub mode: EqSimMode,
}

impl Default for EqSimConfig {
    fn default() -> Self {
        Self {
            alpha: 0.04,
            beta: 0.5,
            k_close: 8,
            use_softmax: false,
            mode: EqSimMode::Hybrid,
        }
    }
}

impl EqSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must be >= 0, got {}", self.alpha),
            });
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("must be >= 0, got {}", self.beta),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub retrieval: f64,
    pub equivariance: f64,
    pub total: f64,
    pub n_close_pairs: usize,
    pub n_distant_pairs: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.retrieval.is_finite() && self.equivariance.is_finite() && self.total.is_finite()
    }
}

/// Close/distant split of all unordered pairs `(i, j)`, `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairPartition {
    pub close: Vec<(usize, usize)>,
    pub distant: Vec<(usize, usize)>,
}

/// Symmetric cross-entropy over rows (image-to-text) and columns
/// (text-to-image) of a raw score matrix.
pub fn itc_loss(m: &BatchSimilarities) -> f64 {
    let n = m.n();
    let rows: f64 = (0..n).map(|i| log_sum_exp(m.row(i)) - m.get(i, i)).sum();
    let cols: f64 = (0..n).map(|j| log_sum_exp(&m.column(j)) - m.get(j, j)).sum();
    0.5 * (rows + cols) / n as f64
}

/// Gradient of [`itc_loss`] with respect to every entry, row-major.
pub fn itc_grad(m: &BatchSimilarities) -> Vec<f64> {
    let n = m.n();
    let scale = 0.5 / n as f64;
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        for (j, p) in softmax(m.row(i)).into_iter().enumerate() {
            grad[i * n + j] += scale * p;
        }
        grad[i * n + i] -= scale;
    }
    for j in 0..n {
        for (i, p) in softmax(&m.column(j)).into_iter().enumerate() {
            grad[i * n + j] += scale * p;
        }
        grad[j * n + j] -= scale;
    }
    grad
}

/// Partial derivatives of a grid term in the order `(s11, s12, s21, s22)`.
type GridGrad = [f64; 4];

fn hinged_square(dev: f64, alpha: f64) -> (f64, f64) {
    let sq = dev * dev;
    if sq > alpha {
        (sq - alpha, 2.0 * dev)
    } else {
        (0.0, 0.0)
    }
}

fn v1_term(g: &SimilarityGrid, alpha: f64) -> (f64, GridGrad) {
    let (value, d) = hinged_square(g.s12 - g.s21, alpha);
    (value, [0.0, d, -d, 0.0])
}

fn v2_term(g: &SimilarityGrid, alpha: f64) -> (f64, GridGrad) {
    // (s11 - s12) - (s22 - s21)
    let (text_value, dt) = hinged_square(g.s11 - g.s12 - g.s22 + g.s21, alpha);
    // (s11 - s21) - (s22 - s12)
    let (image_value, di) = hinged_square(g.s11 - g.s21 - g.s22 + g.s12, alpha);
    (
        text_value + image_value,
        [dt + di, -dt + di, dt - di, -dt - di],
    )
}

/// `max((s12 - s21)^2 - alpha, 0)`.
pub fn eqsim_v1(g: &SimilarityGrid, alpha: f64) -> f64 {
    v1_term(g, alpha).0
}

/// Sum of both v2 identities, each hinged independently.
pub fn eqsim_v2(g: &SimilarityGrid, alpha: f64) -> f64 {
    v2_term(g, alpha).0
}

pub fn classify_pairs(m: &BatchSimilarities, k_close: usize) -> Result<PairPartition> {
    let n = m.n();
    if k_close >= n {
        return Err(Error::BadK { k: k_close, n });
    }
    let mut close = vec![false; n * n];
    for i in 0..n {
        let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        // Highest score first; equal scores rank the lower index first.
        partners.sort_by(|&a, &b| m.get(i, b).total_cmp(&m.get(i, a)).then(a.cmp(&b)));
        for &j in &partners[..k_close] {
            close[i.min(j) * n + i.max(j)] = true;
        }
    }
    let mut partition = PairPartition::default();
    for i in 0..n {
        for j in i + 1..n {
            if close[i * n + j] {
                partition.close.push((i, j));
            } else {
                partition.distant.push((i, j));
            }
        }
    }
    Ok(partition)
}

#[derive(Clone, Copy)]
enum Variant {
    V1,
    V2,
}

/// Mean of one regularizer over `pairs`, accumulating its gradient into `grad`.
fn accumulate(
    m: &BatchSimilarities,
    pairs: &[(usize, usize)],
    variant: Variant,
    alpha: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let n = m.n();
    let weight = 1.0 / pairs.len() as f64;
    let mut sum = 0.0;
    for &(i, j) in pairs {
        let g = grid_from_matrix(m, i, j)?;
        let (value, d) = match variant {
            Variant::V1 => v1_term(&g, alpha),
            Variant::V2 => v2_term(&g, alpha),
        };
        sum += value;
        for (slot, di) in [(i * n + i, d[0]), (i * n + j, d[1]), (j * n + i, d[2]), (j * n + j, d[3])] {
            grad[slot] += weight * di;
        }
    }
    Ok(sum * weight)
}

/// Equivariance loss with its gradient with respect to `m` (row-major).
/// The pair partition is treated as constant.
pub fn eq_loss_with_grad(
    m: &BatchSimilarities,
    cfg: &EqSimConfig,
) -> Result<(f64, PairPartition, Vec<f64>)> {
    if m.is_normalized() != cfg.use_softmax {
        return Err(Error::NormalizationMismatch {
            matrix: m.is_normalized(),
            config: cfg.use_softmax,
        });
    }
    cfg.validate()?;
    let partition = classify_pairs(m, cfg.k_close)?;
    let mut grad = vec![0.0; m.n() * m.n()];
    let a = cfg.alpha;
    let loss = match cfg.mode {
        EqSimMode::Off => 0.0,
        EqSimMode::Hybrid => {
            accumulate(m, &partition.close, Variant::V2, a, &mut grad)?
                + accumulate(m, &partition.distant, Variant::V1, a, &mut grad)?
        }
        EqSimMode::V1All | EqSimMode::V2All => {
            let all: Vec<_> = {
                let mut all = [partition.close.as_slice(), partition.distant.as_slice()].concat();
                all.sort_unstable();
                all
            };
            let variant = if cfg.mode == EqSimMode::V1All { Variant::V1 } else { Variant::V2 };
            accumulate(m, &all, variant, a, &mut grad)?
        }
        EqSimMode::V2CloseOnly => accumulate(m, &partition.close, Variant::V2, a, &mut grad)?,
    };
    Ok((loss, partition, grad))
}

pub fn eq_loss(m: &BatchSimilarities, cfg: &EqSimConfig) -> Result<(f64, PairPartition)> {
    eq_loss_with_grad(m, cfg).map(|(loss, partition, _)| (loss, partition))
}

/// Pull a gradient on `softmax_rows(raw)` back onto `raw`, given the
/// normalized matrix.
pub fn softmax_rows_backward(normalized: &BatchSimilarities, grad: &[f64]) -> Vec<f64> {
    let n = normalized.n();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let p = normalized.row(i);
        let g = &grad[i * n..(i + 1) * n];
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..n {
            out[i * n + k] = p[k] * (g[k] - inner);
        }
    }
    out
}

/// Total loss together with its gradient with respect to the raw matrix.
pub fn total_loss_with_grad(
    m: &BatchSimilarities,
    cfg: &EqSimConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if m.is_normalized() {
        return Err(Error::AlreadyNormalized);
    }
    let retrieval = itc_loss(m);
    let mut grad = itc_grad(m);
    let (equivariance, partition, eq_grad) = if cfg.use_softmax {
        let normalized = softmax_rows(m)?;
        let (loss, partition, g) = eq_loss_with_grad(&normalized, cfg)?;
        (loss, partition, softmax_rows_backward(&normalized, &g))
    } else {
        eq_loss_with_grad(m, cfg)?
    };
    for (g, e) in grad.iter_mut().zip(eq_grad) {
        *g += cfg.beta * e;
    }
    let breakdown = LossBreakdown {
        retrieval,
        equivariance,
        total: retrieval + cfg.beta * equivariance,
        n_close_pairs: partition.close.len(),
        n_distant_pairs: partition.distant.len(),
    };
    Ok((breakdown, grad))
}

pub fn total_loss(m: &BatchSimilarities, cfg: &EqSimConfig) -> Result<LossBreakdown> {
    total_loss_with_grad(m, cfg).map(|(b, _)| b)
}

/// The two ratios `(s11 - s12) / (s11 - s21)` and `(s22 - s21) / (s22 - s12)`,
/// both 1 for an equivariant grid. `None` near a singular denominator.
pub fn equivariance_ratio(g: &SimilarityGrid, eps: f64) -> Option<(f64, f64)> {
    let (d1, d2) = (g.s11 - g.s21, g.s22 - g.s12);
    if d1.abs() > eps && d2.abs() > eps {
        Some(((g.s11 - g.s12) / d1, (g.s22 - g.s21) / d2))
    } else {
        None
    }
}
