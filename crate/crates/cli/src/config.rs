//! Experiment configuration files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use warpgrad_core::meta::MetaObjectiveKind;
use warpgrad_core::train::{OuterOptimizerKind, Prior, TrainConfig};

use crate::error::{config_err, io_err, HarnessError, Result};
use crate::experiments::continual::ContinualProtocol;
use crate::experiments::fewshot::FewshotProtocol;
use crate::experiments::synth2d::Synth2dProtocol;

/// Protocol-specific part of an experiment config.
pub trait Protocol: Clone + Default + Serialize + DeserializeOwned {
    /// Training defaults of this experiment at desk scale.
    fn default_train() -> TrainConfig;

    /// Values that differ from the reference protocol: `(setting, reference, used)`.
    fn deviations(&self, train: &TrainConfig) -> Vec<(String, String, String)>;

    fn validate(&self, train: &TrainConfig) -> Result<()>;

    fn default_metrics_every() -> usize {
        1
    }
}

/// One experiment: shared training hyper-parameters plus the protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "P: Protocol")]
pub struct ExperimentConfig<P: Protocol> {
    pub train: TrainConfig,
    pub protocol: P,
    /// Write the per-figure CSVs.
    pub emit_plot_data: bool,
    /// Fill the `wall_ms` metrics column; off by default so metrics are reproducible byte for byte.
    pub wall_clock: bool,
    /// Write a checkpoint every this many meta-steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Record training rows every this many meta-steps.
    pub metrics_every: usize,
}

impl<P: Protocol> Default for ExperimentConfig<P> {
    fn default() -> Self {
        Self {
            train: P::default_train(),
            protocol: P::default(),
            emit_plot_data: true,
            wall_clock: false,
            checkpoint_every: 0,
            metrics_every: P::default_metrics_every(),
        }
    }
}

impl<P: Protocol> ExperimentConfig<P> {
    /// Reads a config file; absent keys (at any depth) take this experiment's
    /// defaults, unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let overrides: Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, overrides);
        serde_json::from_value(merged)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.metrics_every == 0 {
            return Err(config_err("metrics_every must be at least 1"));
        }
        self.protocol.validate(&self.train)
    }

    pub fn deviations(&self) -> Vec<(String, String, String)> {
        self.protocol.deviations(&self.train)
    }

    /// Hash of every setting that affects results.
    ///
    /// The run length and thread count are excluded, so a run can be resumed
    /// with a larger budget or a different pool size.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.train.meta_steps = 0;
        c.train.threads = 1;
        c.checkpoint_every = 0;
        c.emit_plot_data = false;
        c.wall_clock = false;
        let bytes = serde_json::to_vec(&c).expect("configs serialize");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Overlays `patch` on `base`, recursing into objects present in both.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // a tagged value switching variant is replaced whole
                    Some(slot) if slot.is_object() && v.is_object() && same_tag(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn same_tag(a: &Value, b: &Value) -> bool {
    b.get("type").is_none() || a.get("type") == b.get("type")
}

fn differ<T: PartialEq + std::fmt::Debug>(
    out: &mut Vec<(String, String, String)>,
    name: &str,
    reference: T,
    used: T,
) {
    if reference != used {
        out.push((name.to_string(), format!("{reference:?}"), format!("{used:?}")));
    }
}

impl Protocol for Synth2dProtocol {
    fn default_train() -> TrainConfig {
        TrainConfig {
            alpha: 0.1,
            beta: 0.003,
            k: 100,
            meta_batch: 10,
            meta_steps: 100,
            objective: MetaObjectiveKind::Full,
            ..TrainConfig::default()
        }
    }

    fn deviations(&self, t: &TrainConfig) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        differ(&mut out, "train.alpha", 0.1, t.alpha);
        differ(&mut out, "train.k", 100, t.k);
        differ(&mut out, "train.meta_batch", 10, t.meta_batch);
        differ(&mut out, "train.meta_steps", 100, t.meta_steps);
        differ(&mut out, "protocol.warp_hidden", vec![30, 30], self.warp_hidden.clone());
        out
    }

    fn validate(&self, train: &TrainConfig) -> Result<()> {
        Synth2dProtocol::validate(self, train)
    }
}

impl Protocol for ContinualProtocol {
    fn default_train() -> TrainConfig {
        TrainConfig {
            alpha: 0.001,
            beta: 0.001,
            k: 100,
            meta_batch: 5,
            meta_steps: 2000,
            objective: MetaObjectiveKind::Full,
            optimizer: OuterOptimizerKind::adam(),
            ..TrainConfig::default()
        }
    }

    fn deviations(&self, t: &TrainConfig) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        differ(&mut out, "train.alpha", 0.001, t.alpha);
        differ(&mut out, "train.beta", 0.001, t.beta);
        differ(&mut out, "train.meta_batch", 5, t.meta_batch);
        differ(&mut out, "train.meta_steps", 20_000, t.meta_steps);
        differ(&mut out, "protocol.steps_per_subtask", 20, self.steps_per_subtask);
        differ(&mut out, "protocol.batch_size", 5, self.batch_size);
        differ(&mut out, "protocol.eval_tasks", 100, self.eval_tasks);
        differ(&mut out, "protocol.width", 200, self.width);
        differ(&mut out, "protocol.warp_hidden", 100, self.warp_hidden);
        out
    }

    fn validate(&self, train: &TrainConfig) -> Result<()> {
        ContinualProtocol::validate(self, train)
    }

    fn default_metrics_every() -> usize {
        10
    }
}

impl Protocol for FewshotProtocol {
    fn default_train() -> TrainConfig {
        TrainConfig {
            alpha: 0.01,
            beta: 0.001,
            lambda: 1.0,
            k: 5,
            meta_batch: 5,
            meta_steps: 300,
            prior: Prior::Maml,
            objective: MetaObjectiveKind::Full,
            ..TrainConfig::default()
        }
    }

    fn deviations(&self, t: &TrainConfig) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        differ(&mut out, "train.k", 5, t.k);
        out
    }

    fn validate(&self, train: &TrainConfig) -> Result<()> {
        FewshotProtocol::validate(self, train)
    }
}

pub type Synth2dConfig = ExperimentConfig<Synth2dProtocol>;
pub type ContinualConfig = ExperimentConfig<ContinualProtocol>;
pub type FewshotConfig = ExperimentConfig<FewshotProtocol>;
