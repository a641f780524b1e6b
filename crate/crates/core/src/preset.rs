//! Named bundles of search space, task, cost model and schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::latency::SyntheticCost;
use crate::search::{SearchHyperparams, TrainHyperparams};
use crate::space::SearchSpaceConfig;

/// The presets shipped with the workspace.
pub const BUILTIN_PRESETS: &str = include_str!("../../../presets.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub space: SearchSpaceConfig,
    pub task: TaskConfig,
    pub cost: SyntheticCost,
    pub search: SearchHyperparams,
    pub train: TrainHyperparams,
    /// Epochs for training a distillation teacher from scratch; students use `train.epochs`.
    pub teacher_epochs: usize,
    /// Final rates of the two derived branches, fine first.
    pub final_rates: [u32; 2],
}

impl Preset {
    pub fn builtin(name: &str) -> Result<Self> {
        let all = Self::parse_all(BUILTIN_PRESETS)?;
        let names: Vec<&str> = all.keys().map(String::as_str).collect();
        let p = all
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset `{name}`, expected one of {names:?}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn builtin_names() -> Vec<String> {
        Self::parse_all(BUILTIN_PRESETS).map(|m| m.into_keys().collect()).unwrap_or_default()
    }

    pub fn parse_all(json: &str) -> Result<BTreeMap<String, Preset>> {
        serde_json::from_str(json).map_err(|e| Error::InvalidConfig(format!("presets: {e}")))
    }

    pub fn final_pair(&self) -> (u32, u32) {
        (self.final_rates[0], self.final_rates[1])
    }

    pub fn teacher_train(&self) -> TrainHyperparams {
        TrainHyperparams { epochs: self.teacher_epochs, ..self.train }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.search.validate()?;
        let [fine, coarse] = self.final_rates;
        if fine >= coarse || !self.space.rates.contains(&fine) || !self.space.rates.contains(&coarse) {
            return Err(Error::InvalidConfig(format!("final rates {:?} must be two increasing configured rates", self.final_rates)));
        }
        let stride = *self.space.rates.iter().max().unwrap_or(&1) as usize;
        let t = &self.task;
        if !t.height.is_multiple_of(stride) || !t.width.is_multiple_of(stride) {
            return Err(Error::InvalidConfig(format!("task {}x{} is not divisible by the coarsest rate {stride}", t.height, t.width)));
        }
        if t.classes < 2 || t.train_samples < 2 || t.val_samples == 0 {
            return Err(Error::InvalidConfig("task needs at least 2 classes, 2 train and 1 val sample".into()));
        }
        Ok(())
    }
}
