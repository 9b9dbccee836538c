//! Subcommand bodies. Each returns the text to print on success.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eqsim::benchbuild::{
    ag_select_pairs, default_action_words, gebc_select, youcook2_select, AgFrame, CookingSegment, GebcBoundary,
    RejectList,
};
use eqsim::losses::LossBreakdown;
use eqsim::synthgen::{Aspect, PairSample};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::jsonl::{self, Header};
use crate::pipeline::{self, Checkpoint};

pub mod kinds {
    pub const EVAL_SET: &str = "eval_set";
    pub const TRAIN_STREAM: &str = "train_stream";
    pub const CHECKPOINT: &str = "checkpoint";
    pub const HISTORY: &str = "history";
    pub const REPORT: &str = "report";
    pub const EQSCORE: &str = "eqscore";
    pub const MANIFEST: &str = "manifest";
}

fn header(kind: &str, cfg: &ExperimentConfig) -> Header {
    Header::new(kind, Some(cfg.seed), cfg)
}

/// How the training batches of a run are reproduced from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStreamSpec {
    pub seed: u64,
    pub stream: String,
    pub batch_size: usize,
    pub edit_fraction: f64,
    pub pool_batches: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn generate(cfg: &ExperimentConfig) -> CliResult<String> {
    let world = pipeline::build_world(cfg)?;
    let samples = pipeline::build_eval_set(cfg, &world)?;
    jsonl::write(&cfg.eval_set_path(), &header(kinds::EVAL_SET, cfg), &samples)?;
    let spec = TrainStreamSpec {
        seed: cfg.seed,
        stream: "batches".into(),
        batch_size: cfg.train.batch_size,
        edit_fraction: cfg.train.edit_fraction,
        pool_batches: cfg.train.pool_batches,
        steps: cfg.train.steps,
    };
    jsonl::write(&cfg.train_stream_path(), &header(kinds::TRAIN_STREAM, cfg), &[spec])?;

    let mut out = format!("wrote {} eval samples to {}\n", samples.len(), cfg.eval_set_path().display());
    for aspect in Aspect::ALL {
        let n = samples.iter().filter(|s| s.edited_aspect == aspect).count();
        let _ = writeln!(out, "  {aspect}: {n}");
    }
    let _ = writeln!(out, "wrote train stream spec to {}", cfg.train_stream_path().display());
    Ok(out)
}

pub fn train(cfg: &ExperimentConfig) -> CliResult<String> {
    let start = Instant::now();
    let world = pipeline::build_world(cfg)?;
    let outcome = pipeline::run_training(cfg, &world)?;
    let checkpoint = Checkpoint {
        seed: cfg.seed,
        mode: cfg.mode(),
        params: outcome.params,
        final_loss: outcome.history.last().copied(),
    };
    jsonl::write(&cfg.checkpoint_path(), &header(kinds::CHECKPOINT, cfg), &[&checkpoint])?;
    let rows: Vec<HistoryRow> = outcome
        .history
        .iter()
        .enumerate()
        .map(|(step, loss)| HistoryRow { step, loss: *loss })
        .collect();
    jsonl::write(&cfg.history_path(), &header(kinds::HISTORY, cfg), &rows)?;

    let mut out = format!(
        "trained {} steps (mode={}) in {:.2}s\n",
        rows.len(),
        cfg.mode(),
        start.elapsed().as_secs_f64()
    );
    if let Some(last) = checkpoint.final_loss {
        let _ = writeln!(
            out,
            "final loss: retrieval={:.6} equivariance={:.6} total={:.6}",
            last.retrieval, last.equivariance, last.total
        );
    }
    let _ = writeln!(out, "wrote {} and {}", cfg.checkpoint_path().display(), cfg.history_path().display());
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let (_, mut records) = jsonl::read::<Checkpoint>(path, kinds::CHECKPOINT)?;
    if records.len() != 1 {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            index: records.len().min(1),
            message: format!("expected exactly one checkpoint record, found {}", records.len()),
        });
    }
    let ckpt = records.remove(0);
    if !ckpt.params.is_finite() {
        return Err(eqsim::Error::NonFinite("checkpoint parameters").into());
    }
    Ok(ckpt)
}

pub fn load_eval_set(path: &Path) -> CliResult<Vec<PairSample>> {
    Ok(jsonl::read::<PairSample>(path, kinds::EVAL_SET)?.1)
}

pub struct EvalInputs {
    pub checkpoint: Option<PathBuf>,
    pub eval_set: Option<PathBuf>,
}

impl EvalInputs {
    fn load(&self, cfg: &ExperimentConfig) -> CliResult<(Checkpoint, Vec<PairSample>)> {
        let ckpt = load_checkpoint(self.checkpoint.as_deref().unwrap_or(&cfg.checkpoint_path()))?;
        let samples = load_eval_set(self.eval_set.as_deref().unwrap_or(&cfg.eval_set_path()))?;
        Ok((ckpt, samples))
    }
}

pub fn eval(cfg: &ExperimentConfig, inputs: &EvalInputs) -> CliResult<String> {
    let start = Instant::now();
    let (ckpt, samples) = inputs.load(cfg)?;
    let report = pipeline::evaluate(cfg, &ckpt, &samples)?;
    let records = vec![
        serde_json::to_value(&report).expect("report serializes"),
        json!({ "summary": report.summary_line() }),
    ];
    jsonl::write(&cfg.report_path(), &header(kinds::REPORT, cfg), &records)?;
    Ok(format!(
        "{}\nwall_clock_seconds={:.3}\nwrote {}\n",
        report.summary_line(),
        start.elapsed().as_secs_f64(),
        cfg.report_path().display()
    ))
}

pub fn eqscore(cfg: &ExperimentConfig, inputs: &EvalInputs, bins: Option<usize>) -> CliResult<String> {
    let bins = bins.unwrap_or(cfg.eval.bins);
    if bins == 0 {
        return Err(eqsim::Error::InvalidParameter {
            name: "bins",
            reason: "must be >= 1".into(),
        }
        .into());
    }
    let (ckpt, samples) = inputs.load(cfg)?;
    let grids = pipeline::eval_grids(&ckpt.params, &samples)?;
    let summary = pipeline::equivariance_summary(&grids, bins)?;
    let mut records = Vec::new();
    let mut out = String::new();
    for (name, h) in [
        ("text_direction", &summary.text_direction),
        ("image_direction", &summary.image_direction),
        ("combined", &summary.combined),
    ] {
        records.push(json!({ "component": name, "n": grids.len(), "mean": h.mean, "std": h.std }));
        for (b, &count) in h.counts.iter().enumerate() {
            records.push(json!({ "component": name, "lo": h.edges[b], "hi": h.edges[b + 1], "count": count }));
        }
        let _ = writeln!(out, "{name}: mean={:.6} std={:.6}", h.mean, h.std);
    }
    jsonl::write(&cfg.eqscore_path(), &header(kinds::EQSCORE, cfg), &records)?;
    let _ = writeln!(out, "wrote {}", cfg.eqscore_path().display());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Ag,
    Gebc,
    Youcook2,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Ag => "ag",
            Source::Gebc => "gebc",
            Source::Youcook2 => "youcook2",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct BenchbuildEcho<'a> {
    source: &'a str,
    input: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    action_words: Option<&'a BTreeSet<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reject_frames: Option<&'a BTreeSet<u64>>,
}

pub fn manifest_path(out_dir: &Path, source: Source) -> PathBuf {
    out_dir.join(format!("manifest_{}.jsonl", source.as_str()))
}

pub fn benchbuild(source: Source, input: &Path, out_dir: &Path, reject_frames: &[u64]) -> CliResult<String> {
    let words = default_action_words();
    let rejects: BTreeSet<u64> = reject_frames.iter().copied().collect();
    let mut echo = BenchbuildEcho {
        source: source.as_str(),
        input,
        action_words: None,
        reject_frames: None,
    };
    let (records, kept, dropped): (Vec<Value>, usize, Vec<(String, usize)>) = match source {
        Source::Ag => {
            let frames: Vec<AgFrame> = jsonl::read_annotations(input)?;
            let pairs = ag_select_pairs(&frames).map_err(|e| CliError::Schema {
                path: input.to_path_buf(),
                index: 0,
                message: e.to_string(),
            })?;
            let n = pairs.len();
            (to_values(&pairs), n, Vec::new())
        }
        Source::Gebc => {
            echo.action_words = Some(&words);
            let boundaries: Vec<GebcBoundary> = jsonl::read_annotations(input)?;
            let sel = gebc_select(&boundaries, &words);
            (to_values(&sel.kept), sel.kept.len(), sel.dropped)
        }
        Source::Youcook2 => {
            echo.reject_frames = Some(&rejects);
            let segments: Vec<CookingSegment> = jsonl::read_annotations(input)?;
            let sel = youcook2_select(&segments, &RejectList(rejects.clone())).map_err(|e| match e {
                eqsim::Error::BadSegment { index, .. } => CliError::Schema {
                    path: input.to_path_buf(),
                    index,
                    message: e.to_string(),
                },
                other => other.into(),
            })?;
            (to_values(&sel.kept), sel.kept.len(), sel.dropped)
        }
    };
    let path = manifest_path(out_dir, source);
    let mut all = records;
    let dropped_map: serde_json::Map<String, Value> = dropped.iter().map(|(r, n)| (r.clone(), json!(n))).collect();
    all.push(json!({ "summary": { "kept": kept, "dropped": dropped_map } }));
    jsonl::write(&path, &Header::new(kinds::MANIFEST, None, &echo), &all)?;

    let mut out = format!("{}: kept {kept}\n", source.as_str());
    for (rule, n) in &dropped {
        let _ = writeln!(out, "  dropped by {rule}: {n}");
    }
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}

fn to_values<T: Serialize>(items: &[T]) -> Vec<Value> {
    items
        .iter()
        .map(|x| serde_json::to_value(x).expect("record serializes"))
        .collect()
}
