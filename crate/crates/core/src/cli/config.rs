use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bc::{BcConfig, CollectConfig};
use crate::domain::RewardScheme;
use crate::error::{Error, Result};
use crate::gateway::HttpConfig;
use crate::orchestrator::{EpisodeConfig, PlanningMode};
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Scenario file of the mock backend. Without one the default generated
    /// world is used.
    pub scenario: Option<PathBuf>,
    pub http: HttpConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            scenario: None,
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL problem files. The mock backend falls back to its scenario's
    /// own train/test problems when these are unset.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Share of the training problems held out as a validation split.
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            val_fraction: 0.0,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub lo: f64,
    pub hi: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            enabled: true,
            lo: 0.05,
            hi: 0.90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Start PPO from a fresh policy instead of the BC checkpoint.
    pub from_scratch: bool,
    /// BC checkpoint PPO starts from; defaults to `<out>/bc.ckpt.json`.
    pub init_checkpoint: Option<PathBuf>,
    /// Write the PPO checkpoint every this many updates (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            from_scratch: false,
            init_checkpoint: None,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policies: Vec<String>,
    /// Reasoning-round budgets to sweep.
    pub rounds: Vec<usize>,
    /// `test`, `val` or `train`.
    pub split: String,
    pub few_shot_k: usize,
    /// Learned-policy checkpoint; defaults to the PPO checkpoint in the
    /// output directory, then the BC one.
    pub checkpoint: Option<PathBuf>,
    pub tot_hint_samples: usize,
    pub tot_temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            policies: vec!["random".into(), "learned".into()],
            rounds: vec![2],
            split: "test".into(),
            few_shot_k: 3,
            checkpoint: None,
            tot_hint_samples: 3,
            tot_temperature: 1.0,
        }
    }
}

/// Everything a command needs. Defaults are the reference hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// `pick-strategy`, `pick-strategy-no-hint`, `pick-hint` or
    /// `pick-hint-no-strategy`.
    pub mode: String,
    pub backend: BackendConfig,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub collect: CollectConfig,
    pub filter: FilterConfig,
    pub bc: BcConfig,
    pub ppo: PpoConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            mode: PlanningMode::default().to_string(),
            backend: BackendConfig::default(),
            data: DataConfig::default(),
            episode: EpisodeConfig::default(),
            collect: CollectConfig::default(),
            filter: FilterConfig::default(),
            bc: BcConfig::default(),
            ppo: PpoConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            what: "config".into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::Parse {
                what: format!("config {}", path.display()),
                reason,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Applies a `section.key=value` override. The value is read as a TOML
    /// literal and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "override '{assignment}' is not of the form key=value"
            ))
        })?;
        let key = key.trim();
        let value = parse_literal(raw.trim());
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("'{key}' does not name a config key")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = tree.try_into().map_err(|e: toml::de::Error| {
            Error::config(format!("override '{assignment}': {}", e.message()))
        })?;
        Ok(())
    }

    pub fn planning_mode(&self) -> Result<PlanningMode> {
        self.mode.parse().map_err(Error::Config)
    }

    pub fn reward(&self) -> RewardScheme {
        self.episode.reward
    }

    pub fn validate(&self) -> Result<()> {
        self.planning_mode()?;
        self.ppo.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.val_fraction must lie in [0, 1)"));
        }
        if !(self.filter.lo <= self.filter.hi) {
            return Err(Error::config("filter.lo must not exceed filter.hi"));
        }
        if self.eval.rounds.is_empty() {
            return Err(Error::config("eval.rounds is empty"));
        }
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return Err(Error::config(format!(
                "unknown eval split '{}' (expected train, val or test)",
                self.eval.split
            )));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
