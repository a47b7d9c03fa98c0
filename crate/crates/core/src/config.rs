//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. Every key is optional; [`ExperimentConfig::to_text`] writes the
//! fully resolved form, which parses back to the same value.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph;
use crate::model::MgtConfig;
use crate::train::TrainConfig;

pub const DATA_DIR_ENV: &str = "SKETCHMGT_DATA_DIR";

/// Key, default shown in `--help` style listings, and description.
pub const KEYS: &[(&str, &str)] = &[
    (
        "data_dir",
        "prepared dataset directory (default $SKETCHMGT_DATA_DIR, else `data`)",
    ),
    ("out_dir", "run output directory (default `runs/default`)"),
    ("seq_len", "sequence length S (default 100)"),
    (
        "d_hat",
        "embedding width per input part; d = 2 * d_hat (default 128)",
    ),
    ("layers", "number of layers L (default 4)"),
    ("heads_per_graph", "attention heads per graph (default 8)"),
    ("dropout", "dropout probability (default 0.25)"),
    (
        "graphs",
        "ordered graph list, e.g. khop:1,khop:2,global (default)",
    ),
    (
        "mask_mode",
        "pre_softmax or post_softmax (default pre_softmax)",
    ),
    ("self_loops", "true or false (default true)"),
    ("num_classes", "classifier outputs (default 345)"),
    (
        "coord_scale",
        "coordinates are divided by this (default 256)",
    ),
    ("variant", "mgt or ff_only (default mgt)"),
    ("graph_seed", "seed for random graphs (default 0)"),
    ("lr", "initial learning rate (default 5e-5)"),
    ("lr_decay", "learning-rate decay factor (default 0.7)"),
    ("lr_decay_every", "epochs between decays (default 10)"),
    ("max_epochs", "epoch budget (default 100)"),
    ("patience", "early-stopping patience in epochs (default 10)"),
    ("batch_size", "mini-batch size (default 128)"),
    (
        "seed",
        "initialisation, shuffling and dropout seed (default 0)",
    ),
    ("precision", "f32 or f64 (default f32)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: MgtConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data_dir = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| "data".into());
        ExperimentConfig {
            data_dir,
            out_dir: "runs/default".into(),
            model: MgtConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{v}`: {e}"),
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, val)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("expected `key = value`, found `{line}`"),
                });
            };
            let (key, val) = (key.trim(), val.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "given more than once".into(),
                });
            }
            cfg.set(key, val)?;
            seen.push(key.into());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "seq_len" => m.seq_len = value(key, v)?,
            "d_hat" => m.d_hat = value(key, v)?,
            "layers" => m.layers = value(key, v)?,
            "heads_per_graph" => m.heads_per_graph = value(key, v)?,
            "dropout" => m.dropout = value(key, v)?,
            "graphs" => {
                m.graph_specs = graph::GraphSpec::parse_list(v).map_err(|e| Error::Config {
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "mask_mode" => m.mask_mode = value(key, v)?,
            "self_loops" => m.self_loops = value(key, v)?,
            "num_classes" => m.num_classes = value(key, v)?,
            "coord_scale" => m.coord_scale = value(key, v)?,
            "variant" => m.variant = value(key, v)?,
            "graph_seed" => m.graph_seed = value(key, v)?,
            "lr" => t.initial_lr = value(key, v)?,
            "lr_decay" => t.decay_factor = value(key, v)?,
            "lr_decay_every" => t.decay_every = value(key, v)?,
            "max_epochs" => t.max_epochs = value(key, v)?,
            "patience" => t.patience = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "seed" => t.seed = value(key, v)?,
            "precision" => t.precision = value(key, v)?,
            other => {
                return Err(Error::Config {
                    key: other.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let prec = match t.precision {
            crate::tensor::Precision::F32 => "f32",
            crate::tensor::Precision::F64 => "f64",
        };
        let rows: Vec<(&str, String)> = vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("seq_len", m.seq_len.to_string()),
            ("d_hat", m.d_hat.to_string()),
            ("layers", m.layers.to_string()),
            ("heads_per_graph", m.heads_per_graph.to_string()),
            ("dropout", m.dropout.to_string()),
            ("graphs", graph::format_list(&m.graph_specs)),
            ("mask_mode", m.mask_mode.to_string()),
            ("self_loops", m.self_loops.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("coord_scale", m.coord_scale.to_string()),
            ("variant", m.variant.to_string()),
            ("graph_seed", m.graph_seed.to_string()),
            ("lr", t.initial_lr.to_string()),
            ("lr_decay", t.decay_factor.to_string()),
            ("lr_decay_every", t.decay_every.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("precision", prec.to_string()),
        ];
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
