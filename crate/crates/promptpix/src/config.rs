//! Run configuration: one TOML document covering every stage.
//!
//! A [`RunConfig`] carries five sections (corpus, model, train, eval, io)
//! plus a schema version. Unknown keys anywhere in the tree are rejected;
//! sections omitted from a file take their individual defaults. Two named
//! profiles bundle coherent settings: `paper` is the full-size network the
//! cost accounting is quoted for, `toy` is the desk-scale setup the
//! training and evaluation suites run on.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ScenePool;
use crate::model::BackboneConfig;
use crate::ops::{TaskKind, TaskSpec};
use crate::train::{LrSchedule, TrainConfig};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Seed for operator parameters and scene assignment.
    pub seed: u64,
    /// Samples generated per task.
    pub n_per_task: usize,
    /// Seed of the procedural scene pool.
    pub pool_seed: u64,
    /// First scene id in the pool.
    pub scene_start: u64,
    /// Number of consecutive scene ids. Train and eval corpora are kept
    /// held-out by giving them non-overlapping ranges.
    pub scene_count: u64,
    pub height: usize,
    pub width: usize,
    /// Tasks in the corpus, by id.
    pub tasks: Vec<TaskKind>,
}

impl Default for CorpusConfig {
    fn default() -> CorpusConfig {
        CorpusConfig {
            seed: 7,
            n_per_task: 24,
            pool_seed: 31,
            scene_start: 0,
            scene_count: 100,
            height: 96,
            width: 96,
            tasks: vec![
                TaskKind::GaussianNoise,
                TaskKind::GaussianBlur,
                TaskKind::Canny,
                TaskKind::HistEq,
            ],
        }
    }
}

impl CorpusConfig {
    pub fn pool(&self) -> ScenePool {
        ScenePool::from_range(
            self.pool_seed,
            self.scene_start..self.scene_start + self.scene_count,
            self.height,
            self.width,
        )
    }

    pub fn specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|&k| TaskSpec::new(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("corpus.tasks must not be empty"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::config(format!(
                    "corpus.tasks lists `{}` twice",
                    t.id()
                )));
            }
        }
        if self.scene_count < 2 {
            return Err(Error::config(
                "corpus.scene_count must be at least 2 (input and prompt scenes differ)",
            ));
        }
        if self.n_per_task == 0 {
            return Err(Error::config("corpus.n_per_task must be positive"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("corpus scenes must be at least 8x8"));
        }
        Ok(())
    }
}

/// Evaluation protocol settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seed for prompt draws and suite sampling.
    pub seed: u64,
    /// Prompt pairs per task in the sensitivity sweep.
    pub n_prompts: usize,
    /// Clean inputs per row in the mismatch suite.
    pub n_mismatch_inputs: usize,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            seed: 0,
            n_prompts: 10,
            n_mismatch_inputs: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts < 2 {
            return Err(Error::config("eval.n_prompts must be at least 2"));
        }
        if self.n_mismatch_inputs == 0 {
            return Err(Error::config("eval.n_mismatch_inputs must be positive"));
        }
        Ok(())
    }
}

/// Output layout settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Root directory for command outputs when `--out` is not given. The
    /// `PROMPTPIX_OUT_ROOT` environment variable overrides it.
    pub out_root: PathBuf,
}

impl Default for IoConfig {
    fn default() -> IoConfig {
        IoConfig {
            out_root: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Schema version; files written by other versions are rejected.
    pub version: u32,
    pub corpus: CorpusConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            version: CONFIG_VERSION,
            corpus: CorpusConfig::default(),
            model: BackboneConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-size network (the configuration the parameter and MACs budgets
    /// are quoted for) over the complete task list. Training it is not a
    /// desk-scale activity; this profile mainly drives cost accounting.
    pub fn paper() -> RunConfig {
        RunConfig {
            corpus: CorpusConfig {
                n_per_task: 50,
                scene_count: 400,
                height: 128,
                width: 128,
                tasks: crate::ops::ALL_TASKS.to_vec(),
                ..CorpusConfig::default()
            },
            model: BackboneConfig::default(),
            ..RunConfig::default()
        }
    }

    /// Desk-scale profile: small network, four representative tasks, and a
    /// training budget of a few CPU-hours.
    pub fn toy() -> RunConfig {
        RunConfig {
            corpus: CorpusConfig::default(),
            model: BackboneConfig::toy(),
            train: TrainConfig {
                seed: 0,
                steps: 1500,
                batch_size: 8,
                patch_size: 64,
                lr: 3e-4,
                schedule: LrSchedule::Cosine { min_factor: 0.1 },
                log_every: 50,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn by_name(name: &str) -> Result<RunConfig> {
        match name {
            "paper" => Ok(RunConfig::paper()),
            "toy" => Ok(RunConfig::toy()),
            other => Err(Error::config(format!(
                "unknown profile `{other}` (expected `toy` or `paper`)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config(format!("parsing config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serializing config: {e}")))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(Error::io(format!("reading config {}", path.display())))?;
        let cfg = RunConfig::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)
            .map_err(Error::io(format!("writing config {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::toy().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        assert_eq!(RunConfig::toy().model.channels, [16, 32, 64, 128]);
        assert!(RunConfig::by_name("nope").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        for text in [
            "version = 1\nbogus = 3\n",
            "version = 1\n[train]\nbogus = 3\n",
            "version = 1\n[model]\nbogus = 3\n",
            "version = 1\n[corpus]\nbogus = 3\n",
        ] {
            let err = RunConfig::from_toml(text)
                .err()
                .expect("unknown key must be rejected");
            assert!(err.to_string().contains("bogus"), "got: {err}");
            assert_eq!(err.exit_code(), 2);
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let cfg = RunConfig::from_toml("version = 99\n").unwrap();
        let err = cfg.validate().err().expect("version 99 must be rejected");
        assert!(err.to_string().contains("99"), "got: {err}");
    }

    #[test]
    fn partial_sections_keep_individual_defaults() {
        let cfg = RunConfig::from_toml("version = 1\n[corpus]\nscene_count = 12\n").unwrap();
        assert_eq!(cfg.corpus.scene_count, 12);
        assert_eq!(cfg.corpus.height, CorpusConfig::default().height);
        assert_eq!(cfg.model, BackboneConfig::default());
    }

    #[test]
    fn toml_round_trips_both_profiles() {
        for cfg in [RunConfig::toy(), RunConfig::paper()] {
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn bad_section_values_are_named() {
        let mut cfg = RunConfig::toy();
        cfg.corpus.tasks = vec![TaskKind::Canny, TaskKind::Canny];
        let err = cfg.validate().err().expect("duplicate task");
        assert!(err.to_string().contains("canny"), "got: {err}");

        let mut cfg = RunConfig::toy();
        cfg.eval.n_prompts = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::toy();
        cfg.corpus.scene_count = 1;
        assert!(cfg.validate().is_err());
    }
}
