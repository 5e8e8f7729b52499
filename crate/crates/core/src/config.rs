//! Experiment configuration: declarative description of the dataset,
//! the federation, the unlearning schedule, and the algorithm sweep.
//!
//! The structs deserialize from any serde format (the bundled CLI feeds
//! them TOML) and validate as a whole via [`ExperimentConfig::validate`].
//! Checks that need the concrete dataset geometry (patch fit, label
//! shift range) run later, when the data is built.

use crate::data::{Corner, PartitionScheme, PartitionSpec, TriggerSpec};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

/// Unlearning algorithm selector.
///
/// `Fedosd` is the full method: unlearning steps along the steepest
/// descent direction orthogonal to the remaining clients' gradients,
/// followed by post-training with conflict-projected aggregation. The
/// others are ablations and baselines of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Orthogonal steepest descent plus projected post-training.
    Fedosd,
    /// Gradient ascent on the plain cross-entropy of the target shard.
    GradientAscent,
    /// Steps along the negated raw gradient of the unlearning loss.
    NegatedGradient,
    /// Random direction inside the null space of the remaining gradients.
    RandomNull,
    /// Full method minus the post-training projection.
    NoProjection,
    /// Trains from scratch without the target client.
    Retraining,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Fedosd,
        Algorithm::GradientAscent,
        Algorithm::NegatedGradient,
        Algorithm::RandomNull,
        Algorithm::NoProjection,
        Algorithm::Retraining,
    ];

    /// Stable identifier used in config files and output paths.
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedosd => "fedosd",
            Algorithm::GradientAscent => "gradient_ascent",
            Algorithm::NegatedGradient => "negated_gradient",
            Algorithm::RandomNull => "random_null",
            Algorithm::NoProjection => "no_projection",
            Algorithm::Retraining => "retraining",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown algorithm {s:?}, expected one of {known:?}"))
            })
    }
}

/// Synthetic Gaussian-blob source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

/// On-disk IDX image source (train and test image/label file pairs).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// "iid", "pat10", "pat20", or "pat50".
    pub scheme: String,
    pub clients: usize,
}

impl PartitionConfig {
    pub fn to_spec(&self) -> Result<PartitionSpec> {
        let scheme = match self.scheme.as_str() {
            "iid" => PartitionScheme::Iid,
            "pat10" => PartitionScheme::Pat(10),
            "pat20" => PartitionScheme::Pat(20),
            "pat50" => PartitionScheme::Pat(50),
            other => {
                return Err(Error::Config(format!(
                    "unknown partition scheme {other:?}, expected \"iid\", \"pat10\", \"pat20\", or \"pat50\""
                )))
            }
        };
        Ok(PartitionSpec { scheme, clients: self.clients })
    }
}

fn default_patch_size() -> usize {
    3
}
fn default_patch_value() -> f64 {
    1.0
}
fn default_corner() -> String {
    "bottom_right".into()
}
fn default_label_shift() -> usize {
    5
}
fn default_fraction() -> f64 {
    0.5
}

/// Backdoor trigger stamped onto the target client's shard.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_patch_value")]
    pub patch_value: f64,
    /// "bottom_right", "bottom_left", "top_right", or "top_left".
    #[serde(default = "default_corner")]
    pub corner: String,
    #[serde(default = "default_label_shift")]
    pub label_shift: usize,
    /// Fraction of the target's training rows that carry the trigger.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            patch_size: default_patch_size(),
            patch_value: default_patch_value(),
            corner: default_corner(),
            label_shift: default_label_shift(),
            fraction: default_fraction(),
        }
    }
}

impl TriggerConfig {
    pub fn to_spec(&self) -> Result<TriggerSpec> {
        let corner = match self.corner.as_str() {
            "bottom_right" => Corner::BottomRight,
            "bottom_left" => Corner::BottomLeft,
            "top_right" => Corner::TopRight,
            "top_left" => Corner::TopLeft,
            other => {
                return Err(Error::Config(format!(
                    "unknown trigger corner {other:?}, expected \"bottom_right\", \
                     \"bottom_left\", \"top_right\", or \"top_left\""
                )))
            }
        };
        Ok(TriggerSpec {
            patch_size: self.patch_size,
            patch_value: self.patch_value,
            corner,
            label_shift: self.label_shift,
        })
    }
}

/// Data section: exactly one source plus partition and trigger.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxConfig>,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub trigger: TriggerConfig,
}

fn default_lr_decay() -> f64 {
    0.999
}
fn default_epochs() -> usize {
    1
}
fn default_asr_stop_threshold() -> f64 {
    0.01
}
fn default_asr_stop_patience() -> usize {
    3
}
fn default_max_degenerate_skips() -> usize {
    5
}

/// Federation and schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Client whose contribution is unlearned.
    #[serde(default)]
    pub target_client: usize,
    /// Hidden layer widths of the shared multilayer perceptron; empty
    /// for a linear softmax model.
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    /// Learning rate at round 0.
    pub lr0: f64,
    /// Per-round multiplicative decay, applied across every stage.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    /// Local epochs per round.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Local minibatch size; 0 trains full-batch.
    #[serde(default)]
    pub batch_size: usize,
    /// Federated averaging rounds before unlearning starts.
    pub pretrain_rounds: usize,
    /// Upper bound on unlearning rounds. Zero skips the stage, leaving
    /// the pretrained model untouched going into post-training.
    pub unlearn_rounds: usize,
    /// Unlearning plus post-training round budget. Post-training runs
    /// for whatever this leaves after the unlearning stage stops.
    pub total_rounds: usize,
    /// Unlearning stops early once the attack success rate stays at or
    /// below this threshold for `asr_stop_patience` consecutive rounds.
    #[serde(default = "default_asr_stop_threshold")]
    pub asr_stop_threshold: f64,
    #[serde(default = "default_asr_stop_patience")]
    pub asr_stop_patience: usize,
    /// Consecutive degenerate rounds (no usable direction) tolerated
    /// before the unlearning stage aborts.
    #[serde(default = "default_max_degenerate_skips")]
    pub max_degenerate_skips: usize,
}

/// Sweep section: which algorithms to run, under which seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub engine: EngineConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Cross-field validation. Returns the first violation found.
    pub fn validate(&self) -> Result<()> {
        let sources = usize::from(self.data.blobs.is_some()) + usize::from(self.data.idx.is_some());
        if sources != 1 {
            return Err(Error::Config(format!(
                "exactly one data source must be set (blobs or idx), found {sources}"
            )));
        }
        if let Some(b) = &self.data.blobs {
            if b.classes < 2 {
                return Err(Error::Config("blobs.classes must be at least 2".into()));
            }
            if b.per_class < 5 {
                return Err(Error::Config("blobs.per_class must be at least 5".into()));
            }
            if b.dim < b.classes {
                return Err(Error::Config(format!(
                    "blobs.dim {} must be at least blobs.classes {}",
                    b.dim, b.classes
                )));
            }
            if !b.spread.is_finite() || b.spread < 0.0 {
                return Err(Error::Config(format!(
                    "blobs.spread must be finite and non-negative, got {}",
                    b.spread
                )));
            }
        }
        let spec = self.data.partition.to_spec()?;
        if spec.clients < 2 {
            return Err(Error::Config(format!(
                "partition.clients must be at least 2, got {}",
                spec.clients
            )));
        }
        self.data.trigger.to_spec()?;
        if !(0.0..=1.0).contains(&self.data.trigger.fraction) {
            return Err(Error::Config(format!(
                "trigger.fraction {} must lie in [0, 1]",
                self.data.trigger.fraction
            )));
        }

        let e = &self.engine;
        if e.target_client >= spec.clients {
            return Err(Error::Config(format!(
                "engine.target_client {} out of range for {} clients",
                e.target_client, spec.clients
            )));
        }
        if !e.lr0.is_finite() || e.lr0 <= 0.0 {
            return Err(Error::Config(format!("engine.lr0 must be positive, got {}", e.lr0)));
        }
        if !e.lr_decay.is_finite() || e.lr_decay <= 0.0 || e.lr_decay > 1.0 {
            return Err(Error::Config(format!(
                "engine.lr_decay must lie in (0, 1], got {}",
                e.lr_decay
            )));
        }
        if e.epochs == 0 {
            return Err(Error::Config("engine.epochs must be at least 1".into()));
        }
        if let Some(&w) = e.hidden_layers.iter().find(|&&w| w == 0) {
            return Err(Error::Config(format!("engine.hidden_layers width {w} must be positive")));
        }
        if e.total_rounds < e.unlearn_rounds {
            return Err(Error::Config(format!(
                "engine.total_rounds {} must cover unlearn_rounds {}",
                e.total_rounds, e.unlearn_rounds
            )));
        }
        if !(0.0..1.0).contains(&e.asr_stop_threshold) {
            return Err(Error::Config(format!(
                "engine.asr_stop_threshold {} must lie in [0, 1)",
                e.asr_stop_threshold
            )));
        }
        if e.asr_stop_patience == 0 {
            return Err(Error::Config("engine.asr_stop_patience must be at least 1".into()));
        }
        if e.max_degenerate_skips == 0 {
            return Err(Error::Config("engine.max_degenerate_skips must be at least 1".into()));
        }

        if self.run.algorithms.is_empty() {
            return Err(Error::Config("run.algorithms must not be empty".into()));
        }
        let mut algos = self.run.algorithms.clone();
        algos.sort_by_key(|a| a.name());
        if algos.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("run.algorithms holds duplicates".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        let mut seeds = self.run.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("run.seeds holds duplicates".into()));
        }
        Ok(())
    }
}
