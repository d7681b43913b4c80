//! Flat `key=value` run configuration.
//!
//! Values resolve in order: built-in defaults, then a config file, then
//! `METAKGR_<KEY>` environment variables (key upper-cased), then explicit
//! overrides. Unknown keys are rejected at every layer. Lines starting with
//! `#` and blank lines in files are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::embed::{ConvShape, EmbedKind, PretrainConfig};
use crate::env::{AnswerMask, EnvConfig};
use crate::error::{Error, Result};
use crate::eval::{BeamConfig, KSetting, ScoreMode, SweepConfig};
use crate::meta::{MetaConfig, TaskDistribution};
use crate::policy::PolicyConfig;
use crate::reinforce::{Baseline, TrainConfig};
use crate::tensor::OptimizerKind;

pub const ENV_PREFIX: &str = "METAKGR_";

/// `(key, default, description)`. An empty default means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master random seed"),
    ("workers", "0", "worker threads; 0 uses every core"),
    ("graph", "", "graph checkpoint path"),
    ("split", "", "task-split manifest path"),
    ("reward_model", "", "reward-shaping checkpoint path"),
    ("checkpoint", "", "policy checkpoint path"),
    ("out", "", "output path"),
    ("k", "", "few-shot frequency threshold"),
    ("add_inverses", "true", "add inverse edges when ingesting"),
    ("horizon", "3", "actions per episode"),
    ("action_cap", "256", "maximum action-space size"),
    ("answer_mask", "at_source", "off | first_step | at_source"),
    ("dim", "64", "policy embedding size"),
    ("hidden", "64", "LSTM hidden size"),
    ("mlp_hidden", "64", "policy MLP hidden size"),
    ("embed_kind", "conve", "distmult | conve"),
    ("embed_dim", "32", "reward-model embedding size"),
    ("embed_epochs", "100", "reward-model training epochs"),
    ("embed_lr", "0.01", "reward-model Adam rate"),
    ("embed_batch", "128", "reward-model batch size"),
    ("label_smoothing", "0.1", "reward-model label smoothing"),
    ("conv_rows", "4", "ConvE image rows per vector"),
    ("conv_filters", "8", "ConvE filter count"),
    ("conv_kernel", "3", "ConvE kernel size"),
    ("rollouts", "20", "rollouts per training triple"),
    ("baseline", "moving_average", "none | moving_average"),
    ("baseline_decay", "0.95", "moving-average baseline decay"),
    ("entropy_weight", "0.01", "entropy bonus weight"),
    ("entropy_anneal", "true", "decay the entropy weight linearly to zero over training"),
    ("action_dropout", "0", "sampling-time action dropout rate"),
    ("inner_lr", "0.01", "inner SGD rate"),
    ("outer_lr", "0.001", "outer rate"),
    ("outer_optimizer", "adam", "sgd | adam"),
    ("task_batch", "4", "tasks per outer step"),
    ("support_size", "32", "support triples per task"),
    ("query_size", "32", "query triples per task"),
    ("inner_steps", "1", "inner SGD steps"),
    ("outer_steps", "1000", "outer steps"),
    ("first_order", "true", "first-order meta-gradient"),
    ("task_distribution", "uniform", "uniform | frequency"),
    ("eval_every", "0", "outer steps between meta-validation runs; 0 disables"),
    ("patience", "0", "validation rounds without improvement before stopping; 0 disables"),
    ("adapt_steps", "5", "few-shot adaptation steps"),
    ("beam", "128", "beam width"),
    ("score_mode", "max", "max | sum"),
    ("filtered", "true", "filtered ranking"),
    ("top_k", "10", "candidates per answer record and explanation"),
    ("k_list", "1,5,10,max", "K values for the robustness sweep"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

fn canonical(key: &str) -> Result<&'static str> {
    let key = key.trim().to_ascii_lowercase().replace('-', "_");
    KEYS.iter()
        .map(|&(k, _, _)| k)
        .find(|&k| k == key)
        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let k = canonical(key)?;
        self.values.insert(k, value.into().trim().to_string());
        Ok(())
    }

    /// Applies `key=value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies every `METAKGR_*` variable from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, v)
                .map_err(|e| Error::Config(format!("{ENV_PREFIX}{k}: {e}")))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then the process environment, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = file {
            c.apply_file(p)?;
        }
        c.apply_env(std::env::vars())?;
        for (k, v) in overrides {
            c.set(k, v.clone())?;
        }
        Ok(c)
    }

    /// Raw value; empty for unset optional keys.
    pub fn raw(&self, key: &str) -> &str {
        canonical(key)
            .ok()
            .and_then(|k| self.values.get(k))
            .map_or("", String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let k = canonical(key)?;
        let v = &self.values[k];
        if v.is_empty() {
            return Err(Error::Config(format!("`{k}` is not set")));
        }
        v.parse()
            .map_err(|e: T::Err| Error::Config(format!("`{k}` = `{v}`: {e}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Every key in sorted order as `key=value` lines.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        Ok(EnvConfig {
            horizon: self.get("horizon")?,
            action_cap: self.get("action_cap")?,
            answer_mask: self.get::<AnswerMask>("answer_mask")?,
        })
    }

    pub fn policy_config(&self) -> Result<PolicyConfig> {
        Ok(PolicyConfig {
            dim: self.get("dim")?,
            hidden: self.get("hidden")?,
            mlp_hidden: self.get("mlp_hidden")?,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            kind: self.get::<EmbedKind>("embed_kind")?,
            dim: self.get("embed_dim")?,
            conv: ConvShape {
                rows: self.get("conv_rows")?,
                filters: self.get("conv_filters")?,
                kernel: self.get("conv_kernel")?,
            },
            epochs: self.get("embed_epochs")?,
            lr: self.get("embed_lr")?,
            label_smoothing: self.get("label_smoothing")?,
            batch_size: self.get("embed_batch")?,
            seed: self.get("seed")?,
        })
    }

    /// Settings for REINFORCE; `anneal_over` is the run length the entropy
    /// weight decays across when annealing is on.
    pub fn train_config(&self, anneal_over: usize) -> Result<TrainConfig> {
        let baseline = match self.raw("baseline") {
            "none" => Baseline::None,
            "moving_average" => Baseline::MovingAverage {
                decay: self.get("baseline_decay")?,
            },
            other => return Err(Error::Config(format!("unknown baseline `{other}`"))),
        };
        let cfg = TrainConfig {
            env: self.env_config()?,
            rollouts_per_triple: self.get("rollouts")?,
            lr: self.get("inner_lr")?,
            steps: self.get("adapt_steps")?,
            baseline,
            entropy_weight: self.get("entropy_weight")?,
            entropy_anneal_steps: if self.get::<bool>("entropy_anneal")? {
                anneal_over
            } else {
                0
            },
            action_dropout: self.get("action_dropout")?,
            seed: self.get("seed")?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn meta_config(&self) -> Result<MetaConfig> {
        let outer_steps = self.get("outer_steps")?;
        let cfg = MetaConfig {
            inner_lr: self.get("inner_lr")?,
            outer_lr: self.get("outer_lr")?,
            task_batch: self.get("task_batch")?,
            support_size: self.get("support_size")?,
            query_size: self.get("query_size")?,
            inner_steps: self.get("inner_steps")?,
            outer_steps,
            first_order: self.get("first_order")?,
            task_distribution: self.get::<TaskDistribution>("task_distribution")?,
            outer_optimizer: self.get::<OptimizerKind>("outer_optimizer")?,
            train: self.train_config(outer_steps)?,
            eval_every: self.get("eval_every")?,
            patience: self.get("patience")?,
            seed: self.get("seed")?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn beam_config(&self) -> Result<BeamConfig> {
        Ok(BeamConfig {
            width: self.get("beam")?,
            mode: self.get::<ScoreMode>("score_mode")?,
        })
    }

    pub fn k_list(&self) -> Result<Vec<KSetting>> {
        self.raw("k_list")
            .split(',')
            .map(|s| s.trim().parse::<KSetting>().map_err(|e| Error::Config(e.to_string())))
            .collect()
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            ks: self.k_list()?,
            adapt_steps: self.get("adapt_steps")?,
            beam: self.beam_config()?,
            filtered: self.get("filtered")?,
            seed: self.get("seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_section() {
        let c = RunConfig::default();
        c.env_config().unwrap();
        c.policy_config().unwrap();
        c.pretrain_config().unwrap();
        c.meta_config().unwrap();
        c.sweep_config().unwrap();
        assert_eq!(c.env_config().unwrap(), EnvConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("bogus=1"), Err(Error::Config(_))));
        assert!(c
            .apply_env([("METAKGR_NOPE".to_string(), "1".to_string())])
            .is_err());
    }

    #[test]
    fn layers_override_in_order() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nhorizon = 4\nbeam=8\n").unwrap();
        c.apply_env([
            ("METAKGR_HORIZON".to_string(), "5".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ])
        .unwrap();
        assert_eq!(c.get::<usize>("horizon").unwrap(), 5);
        assert_eq!(c.get::<usize>("beam").unwrap(), 8);
        c.set("horizon", "6").unwrap();
        assert_eq!(c.get::<usize>("horizon").unwrap(), 6);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let err = RunConfig::default().apply_text("seed=1\nnope").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn unset_required_value_is_an_error() {
        assert!(RunConfig::default().get::<usize>("k").is_err());
        assert_eq!(RunConfig::default().optional::<usize>("k").unwrap(), None);
    }

    #[test]
    fn render_lists_every_key() {
        assert_eq!(RunConfig::default().render().lines().count(), KEYS.len());
    }
}
