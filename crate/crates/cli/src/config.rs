//! Experiment configuration files (TOML).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eqsim::losses::EqSimMode;
use eqsim::metrics::DEFAULT_VALSE_THRESHOLD;
use eqsim::model::TrainConfig;
use eqsim::synthgen::{Aspect, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Group,
    Valse,
    Recall,
    Eqscore,
    PerAspect,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Group,
        Metric::Valse,
        Metric::Recall,
        Metric::Eqscore,
        Metric::PerAspect,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub aspect_mix: BTreeMap<Aspect, f64>,
    pub metrics: Vec<Metric>,
    pub valse_threshold: f64,
    pub recall_ks: Vec<usize>,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 2000,
            aspect_mix: Aspect::ALL.iter().map(|&a| (a, 1.0)).collect(),
            metrics: Metric::ALL.to_vec(),
            valse_threshold: DEFAULT_VALSE_THRESHOLD,
            recall_ks: vec![1, 5, 10],
            bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_label: String,
    pub output_dir: PathBuf,
    /// The one run seed; world, init, batch and eval streams derive from it.
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<EqSimMode>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path, overrides)
    }

    pub fn parse(text: &str, path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::config(path, e.to_string()))?;
        for section in ["world", "train"] {
            if table.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(CliError::config(
                    path,
                    format!("{section}.seed is not settable; use the top-level `seed`"),
                ));
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::config(path, e.to_string()))?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            cfg.train.eqsim.mode = mode;
        }
        if let Some(out) = &overrides.out {
            cfg.output_dir = out.clone();
        }
        cfg.world.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate().map_err(|m| CliError::config(path, m))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.run_label.trim().is_empty() {
            return Err("run_label must be nonempty".into());
        }
        self.world.validate().map_err(|e| format!("world: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        let ev = &self.eval;
        if ev.n_eval == 0 {
            return Err("eval.n_eval must be >= 1".into());
        }
        for (aspect, &w) in &ev.aspect_mix {
            if !(w.is_finite() && w >= 0.0) {
                return Err(format!("eval.aspect_mix.{aspect}: weight must be >= 0, got {w}"));
            }
            if w > 0.0 && self.world.cardinality(*aspect) < 2 {
                return Err(format!("eval.aspect_mix.{aspect}: aspect has a single value and cannot be edited"));
            }
        }
        if !ev.aspect_mix.values().any(|&w| w > 0.0) {
            return Err("eval.aspect_mix needs at least one positive weight".into());
        }
        if !(ev.valse_threshold.is_finite() && (0.0..=1.0).contains(&ev.valse_threshold)) {
            return Err(format!("eval.valse_threshold must be in [0, 1], got {}", ev.valse_threshold));
        }
        if ev.recall_ks.iter().any(|&k| k == 0 || k > 2 * ev.n_eval) {
            return Err(format!("eval.recall_ks must lie in 1..={}", 2 * ev.n_eval));
        }
        if ev.bins == 0 {
            return Err("eval.bins must be >= 1".into());
        }
        Ok(())
    }

    pub fn wants(&self, metric: Metric) -> bool {
        self.eval.metrics.contains(&metric)
    }

    pub fn mode(&self) -> EqSimMode {
        self.train.eqsim.mode
    }

    pub fn eval_set_path(&self) -> PathBuf {
        self.output_dir.join("eval_set.jsonl")
    }

    pub fn train_stream_path(&self) -> PathBuf {
        self.output_dir.join("train_stream.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(format!("checkpoint_{}.jsonl", self.mode()))
    }

    pub fn history_path(&self) -> PathBuf {
        self.output_dir.join(format!("history_{}.jsonl", self.mode()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join(format!("report_{}.jsonl", self.mode()))
    }

    pub fn eqscore_path(&self) -> PathBuf {
        self.output_dir.join(format!("eqscore_{}.jsonl", self.mode()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("test.toml"), &Overrides::default())
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse("run_label = \"x\"\noutput_dir = \"out\"\nseed = 3\n").unwrap();
        assert_eq!(cfg.world.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.eval.n_eval, 2000);
        assert_eq!(cfg.mode(), EqSimMode::Hybrid);
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            seed: Some(9),
            mode: Some(EqSimMode::Off),
            out: Some("elsewhere".into()),
        };
        let cfg = ExperimentConfig::parse("run_label = \"x\"\noutput_dir = \"out\"\nseed = 3\n", Path::new("t"), &o).unwrap();
        assert_eq!((cfg.seed, cfg.world.seed, cfg.train.seed), (9, 9, 9));
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("elsewhere/checkpoint_off.jsonl"));
    }

    #[test]
    fn bad_configs_name_the_field() {
        let base = "run_label = \"x\"\noutput_dir = \"out\"\nseed = 3\n";
        let err = parse(&format!("{base}[eval.aspect_mix]\nobject = -1.0\n")).unwrap_err();
        assert!(err.to_string().contains("eval.aspect_mix.object"), "{err}");
        assert_eq!(err.exit_code(), 2);

        let err = parse(&format!("{base}[train]\nlearnin_rate = 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("learnin_rate"), "{err}");

        let err = parse(&format!("{base}[world]\nseed = 1\n")).unwrap_err();
        assert!(err.to_string().contains("world.seed"), "{err}");

        let err = parse("run_label = \"x\"\nseed = 1\n").unwrap_err();
        assert!(err.to_string().contains("output_dir"), "{err}");

        let err = parse(&format!("{base}[train.eqsim]\nk_close = 16\n")).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }
}
