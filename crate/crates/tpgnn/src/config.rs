//! Run configuration: defaults, config-file parsing, and flag precedence.
//!
//! A run is described by one flat `key = value` file plus command-line
//! overrides; flags always win over the file, which wins over the built-in
//! defaults. Keeping the merge order fixed makes any run reproducible from
//! its recorded configuration alone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::training::{NegFeatures, TrainSettings};

/// Which decoder the run trains and scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Link,
    Node,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "link" => Ok(TaskKind::Link),
            "node" => Ok(TaskKind::Node),
            other => Err(Error::usage(format!("unknown task {other:?}; use link or node"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Link => "link",
            TaskKind::Node => "node",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    /// Event CSV; when absent, runs use the synthetic generator.
    pub data: Option<PathBuf>,
    pub task: TaskKind,
    /// Propagation depth (memory layers).
    pub k: usize,
    /// Temporal neighbors sampled per dissemination expansion.
    pub n_neighbors: usize,
    /// Node representation width.
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub heads: usize,
    /// Encoder blocks stacked in the node-wise encoder.
    pub blocks: usize,
    pub patience: usize,
    pub seed: u64,
    /// Learned hop-depth attention scores; false runs the ablation.
    pub layer_attention: bool,
    pub neg_features: NegFeatures,
    pub epochs: usize,
    /// Hidden width of the hop-score network inside each encoder block.
    pub bias_hidden: usize,
    /// Synthetic instance size, used only when `data` is absent.
    pub nodes: usize,
    pub events: usize,
    /// Fixed evaluation batch size; None streams at `batch_size`.
    pub eval_batch: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: None,
            task: TaskKind::Link,
            k: 5,
            n_neighbors: 20,
            dim: 172,
            batch_size: 200,
            lr: 1e-4,
            dropout: 0.1,
            heads: 2,
            blocks: 1,
            patience: 5,
            seed: 0,
            layer_attention: true,
            neg_features: NegFeatures::Reuse,
            epochs: 50,
            bias_hidden: 16,
            nodes: 40,
            events: 6000,
            eval_batch: None,
        }
    }
}

impl Config {
    /// Checks the invariants that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::usage("k must be at least 1"));
        }
        if self.n_neighbors < 1 {
            return Err(Error::usage("n_neighbors must be at least 1"));
        }
        if self.dim == 0 || self.heads == 0 || self.blocks == 0 || self.bias_hidden == 0 {
            return Err(Error::usage("dim, heads, blocks, and bias_hidden must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::usage(format!(
                "dim {} must divide evenly into {} heads",
                self.dim, self.heads
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::usage("batch_size, epochs, and patience must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage("lr must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage("dropout must lie in [0, 1)"));
        }
        if self.eval_batch == Some(0) {
            return Err(Error::usage("eval_batch must be positive when set"));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment, as from a config file line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::usage(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "task" => self.task = value.parse()?,
            "k" => self.k = num(key, value)?,
            "n_neighbors" => self.n_neighbors = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "layer_attention" => self.layer_attention = num(key, value)?,
            "neg_features" => {
                self.neg_features = match value {
                    "reuse" => NegFeatures::Reuse,
                    "zeros" => NegFeatures::Zeros,
                    other => {
                        return Err(Error::usage(format!(
                            "unknown neg_features {other:?}; use reuse or zeros"
                        )))
                    }
                }
            }
            "epochs" => self.epochs = num(key, value)?,
            "bias_hidden" => self.bias_hidden = num(key, value)?,
            "nodes" => self.nodes = num(key, value)?,
            "events" => self.events = num(key, value)?,
            "eval_batch" => self.eval_batch = Some(num(key, value)?),
            other => return Err(Error::usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(idx + 1, format!("expected key = value, got {raw:?}")));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::format(idx + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Architectural dims for a dataset with the given feature width.
    pub fn model_dims(&self, edge_dim: usize, classes: usize) -> ModelDims {
        ModelDims {
            dim: self.dim,
            edge_dim,
            hops: self.k,
            heads: self.heads,
            blocks: self.blocks,
            bias_hidden: self.bias_hidden,
            classes,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            eval_batch: self.eval_batch,
            n_neighbors: self.n_neighbors,
            lr: self.lr,
            dropout: self.dropout,
            hop_bias: self.layer_attention,
            neg_features: self.neg_features,
            seed: self.seed,
            patience: self.patience,
            max_epochs: self.epochs,
        }
    }
}
