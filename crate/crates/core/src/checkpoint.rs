//! Self-describing JSON checkpoints with atomic writes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{PolicyParams, ValueParams};
use crate::ppo::PpoState;
use crate::strategy::StrategyPool;

const FORMAT: &str = "coplanner-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub d: usize,
    pub h: usize,
    pub strategy_order: Vec<String>,
    pub policy: PolicyParams,
    /// Present once value training has started.
    #[serde(default)]
    pub value: Option<ValueParams>,
    /// Full optimizer/RNG/step state for resuming PPO.
    #[serde(default)]
    pub ppo: Option<PpoState>,
    /// Free-form provenance (stage, accuracy, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_policy(policy: PolicyParams, meta: serde_json::Value) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            d: policy.input_dim(),
            h: policy.hidden(),
            strategy_order: StrategyPool.order_names(),
            policy,
            value: None,
            ppo: None,
            meta,
        }
    }

    pub fn from_ppo(state: &PpoState, meta: serde_json::Value) -> Self {
        let mut c = Self::from_policy(state.policy.clone(), meta);
        c.value = Some(state.value.clone());
        c.ppo = Some(state.clone());
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Parse {
            what: "checkpoint".into(),
            reason: e.to_string(),
        })?;
        write_atomic(path, &json)
    }

    /// Loads and validates shapes, finiteness and the strategy order.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            what: format!("checkpoint {}", path.display()),
            reason: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::config(format!(
                "unsupported checkpoint format '{}' (expected '{FORMAT}')",
                self.format
            )));
        }
        let expected = StrategyPool.order_names();
        if self.strategy_order != expected {
            return Err(Error::config(format!(
                "checkpoint strategy order [{}] does not match the pool order [{}]",
                self.strategy_order.join(", "),
                expected.join(", ")
            )));
        }
        self.policy.validate()?;
        if (self.policy.input_dim(), self.policy.hidden()) != (self.d, self.h) {
            return Err(Error::config(format!(
                "policy is {}x{} but the checkpoint header says {}x{}",
                self.policy.input_dim(),
                self.policy.hidden(),
                self.d,
                self.h
            )));
        }
        if let Some(v) = &self.value {
            v.validate()?;
            if v.input_dim() != self.d {
                return Err(Error::config(format!(
                    "value network input is {} but the checkpoint header says {}",
                    v.input_dim(),
                    self.d
                )));
            }
        }
        if let Some(s) = &self.ppo {
            s.policy.validate()?;
            s.value.validate()?;
            if !s.policy_opt.matches(&s.policy) || !s.value_opt.matches(&s.value) {
                return Err(Error::config("optimizer state does not fit the networks"));
            }
        }
        Ok(())
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
