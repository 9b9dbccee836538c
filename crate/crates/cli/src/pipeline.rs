//! Experiment steps shared by the commands and the acceptance suite.

use std::collections::BTreeMap;

use eqsim::losses::{EqSimMode, LossBreakdown};
use eqsim::metrics::{
    equivariance_score, group_metrics, histogram, recall_at_k, valse_metrics, GroupMetricsReport, Histogram,
    RecallReport, SamplePoints, ValseReport,
};
use eqsim::model::{encode, eval_grid, train_on_world, EncoderParams, TrainOutcome};
use eqsim::similarity::{batch_similarity, softmax, SimilarityGrid};
use eqsim::synthgen::{generate_eval_set, Aspect, Modality, PairSample, World};
use eqsim::{seeded_stream, Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Metric};

/// Upper ends of the fixed histogram ranges. Each direction is at most 4 for
/// cosine scores, so the combined score is at most 8.
pub const DIRECTION_MAX: f64 = 4.0;
pub const COMBINED_MAX: f64 = 8.0;

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    World::new(cfg.world.clone())
}

pub fn build_eval_set(cfg: &ExperimentConfig, world: &World) -> Result<Vec<PairSample>> {
    generate_eval_set(world, cfg.eval.n_eval, &cfg.eval.aspect_mix, &mut seeded_stream(cfg.seed, "eval"))
}

pub fn run_training(cfg: &ExperimentConfig, world: &World) -> Result<TrainOutcome> {
    train_on_world(&cfg.train, world)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub mode: EqSimMode,
    pub params: EncoderParams,
    pub final_loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceSummary {
    pub text_direction: Histogram,
    pub image_direction: Histogram,
    pub combined: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_label: String,
    pub seed: u64,
    pub mode: EqSimMode,
    pub n_samples: usize,
    pub final_loss: Option<LossBreakdown>,
    pub group: Option<GroupMetricsReport>,
    pub valse: Option<ValseReport>,
    pub recall: Option<RecallReport>,
    pub equivariance: Option<EquivarianceSummary>,
    pub per_aspect_group: Option<BTreeMap<Aspect, f64>>,
    pub wall_clock_seconds: Option<f64>,
    /// Names of the fields above that were not computed.
    pub skipped: Vec<String>,
}

impl RunReport {
    pub fn summary_line(&self) -> String {
        let mut parts = vec![format!("{} seed={} mode={}", self.run_label, self.seed, self.mode)];
        if let Some(g) = &self.group {
            parts.push(format!(
                "text={:.4} image={:.4} group={:.4}",
                g.text_score, g.image_score, g.group_score
            ));
        }
        if let Some(v) = &self.valse {
            parts.push(format!("valse_acc={:.4} min_pc_pf={:.4}", v.acc, v.min_pc_pf));
        }
        if let Some(r) = &self.recall {
            let fmt = |m: &BTreeMap<usize, f64>| {
                m.iter().map(|(k, v)| format!("R@{k}={v:.4}")).collect::<Vec<_>>().join(",")
            };
            parts.push(format!("i2t[{}] t2i[{}]", fmt(&r.image_to_text), fmt(&r.text_to_image)));
        }
        if let Some(e) = &self.equivariance {
            parts.push(format!("eq_combined mean={:.4} std={:.4}", e.combined.mean, e.combined.std));
        }
        parts.join(" | ")
    }
}

fn check_dims(params: &EncoderParams, samples: &[PairSample]) -> Result<()> {
    let shape = params.shape();
    for s in samples {
        for (v, want) in [
            (&s.image1, shape.d_img),
            (&s.image2, shape.d_img),
            (&s.text1, shape.d_txt),
            (&s.text2, shape.d_txt),
        ] {
            if v.dim() != want {
                return Err(Error::DimensionMismatch {
                    expected: want,
                    got: v.dim(),
                });
            }
        }
    }
    Ok(())
}

pub fn eval_grids(params: &EncoderParams, samples: &[PairSample]) -> Result<Vec<SimilarityGrid>> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    check_dims(params, samples)?;
    samples.iter().map(|s| eval_grid(params, s)).collect()
}

pub fn equivariance_summary(grids: &[SimilarityGrid], bins: usize) -> Result<EquivarianceSummary> {
    let scores: Vec<_> = grids.iter().map(equivariance_score).collect();
    let pick = |f: fn(&eqsim::metrics::EquivarianceScore) -> f64| scores.iter().map(f).collect::<Vec<f64>>();
    Ok(EquivarianceSummary {
        text_direction: histogram(&pick(|s| s.text_direction), bins, Some((0.0, DIRECTION_MAX)))?,
        image_direction: histogram(&pick(|s| s.image_direction), bins, Some((0.0, DIRECTION_MAX)))?,
        combined: histogram(&pick(|s| s.combined), bins, Some((0.0, COMBINED_MAX)))?,
    })
}

/// Each image of a couple picks between its own caption and the edited one
/// with a two-way softmax at the model temperature.
fn valse_scores(grids: &[SimilarityGrid], temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let mut correct = Vec::with_capacity(2 * grids.len());
    let mut foil = Vec::with_capacity(2 * grids.len());
    for g in grids {
        for (right, wrong) in [(g.s11, g.s12), (g.s22, g.s21)] {
            let p = softmax(&[right / temperature, wrong / temperature]);
            correct.push(p[0]);
            foil.push(p[1]);
        }
    }
    (correct, foil)
}

/// Retrieval over every image and text of the eval set (both halves of each couple).
fn retrieval(params: &EncoderParams, samples: &[PairSample], ks: &[usize]) -> Result<RecallReport> {
    let mut images = Vec::with_capacity(2 * samples.len());
    let mut texts = Vec::with_capacity(2 * samples.len());
    for s in samples {
        images.push(encode(params, Modality::Image, &s.image1)?);
        texts.push(encode(params, Modality::Text, &s.text1)?);
    }
    for s in samples {
        images.push(encode(params, Modality::Image, &s.image2)?);
        texts.push(encode(params, Modality::Text, &s.text2)?);
    }
    recall_at_k(&batch_similarity(&images, &texts, 1.0)?, ks)
}

fn per_aspect(grids: &[SimilarityGrid], samples: &[PairSample]) -> BTreeMap<Aspect, f64> {
    let mut tally: BTreeMap<Aspect, (usize, usize)> = BTreeMap::new();
    for (g, s) in grids.iter().zip(samples) {
        let entry = tally.entry(s.edited_aspect).or_default();
        entry.0 += usize::from(SamplePoints::of(g).group);
        entry.1 += 1;
    }
    tally
        .into_iter()
        .map(|(a, (wins, n))| (a, wins as f64 / n as f64))
        .collect()
}

pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Checkpoint, samples: &[PairSample]) -> Result<RunReport> {
    let params = &checkpoint.params;
    let grids = eval_grids(params, samples)?;
    let mut skipped = Vec::new();
    let mut skip = |name: &str| skipped.push(name.to_string());

    let group = if cfg.wants(Metric::Group) {
        Some(group_metrics(&grids)?)
    } else {
        skip("group");
        None
    };
    let valse = if cfg.wants(Metric::Valse) {
        let (correct, foil) = valse_scores(&grids, params.temperature());
        Some(valse_metrics(&correct, &foil, cfg.eval.valse_threshold)?)
    } else {
        skip("valse");
        None
    };
    let recall = if cfg.wants(Metric::Recall) {
        Some(retrieval(params, samples, &cfg.eval.recall_ks)?)
    } else {
        skip("recall");
        None
    };
    let equivariance = if cfg.wants(Metric::Eqscore) {
        Some(equivariance_summary(&grids, cfg.eval.bins)?)
    } else {
        skip("equivariance");
        None
    };
    let per_aspect_group = if cfg.wants(Metric::PerAspect) {
        Some(per_aspect(&grids, samples))
    } else {
        skip("per_aspect_group");
        None
    };
    if checkpoint.final_loss.is_none() {
        skip("final_loss");
    }
    skip("wall_clock_seconds");
    Ok(RunReport {
        run_label: cfg.run_label.clone(),
        seed: cfg.seed,
        mode: checkpoint.mode,
        n_samples: samples.len(),
        final_loss: checkpoint.final_loss,
        group,
        valse,
        recall,
        equivariance,
        per_aspect_group,
        wall_clock_seconds: None,
        skipped,
    })
}

/// Train on the configured world and evaluate on a freshly generated eval set.
pub fn train_and_evaluate(cfg: &ExperimentConfig) -> Result<(TrainOutcome, RunReport)> {
    let world = build_world(cfg)?;
    let samples = build_eval_set(cfg, &world)?;
    let outcome = run_training(cfg, &world)?;
    let checkpoint = Checkpoint {
        seed: cfg.seed,
        mode: cfg.mode(),
        params: outcome.params.clone(),
        final_loss: outcome.history.last().copied(),
    };
    let report = evaluate(cfg, &checkpoint, &samples)?;
    Ok((outcome, report))
}
