//! Training and evaluation runs over prepared dataset directories.
//!
//! A training run writes into its output directory:
//!
//! - `config.txt`: the resolved configuration
//! - `metrics.csv`: one row per epoch
//! - `best.ckpt`, `last.ckpt`: checkpoints of the best and latest epoch
//! - `train.log`: timestamped progress lines

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::checkpoint::{peek_precision, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prepare::Dataset;
use crate::sketch_data::SketchTensor;
use crate::tensor::{Precision, Real};
use crate::train::{evaluate, metrics_csv, EvalReport, Trainer};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const LOG_FILE: &str = "train.log";

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_acc1: f64,
    /// Best model on the test split, when the dataset has one.
    pub test: Option<EvalReport>,
}

fn config_error(key: &str, msg: String) -> Error {
    Error::Config {
        key: key.into(),
        msg,
    }
}

/// Checks that a dataset fits the model configuration.
pub fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.vocab.len() != cfg.model.num_classes {
        return Err(config_error(
            "num_classes",
            format!(
                "is {} but the dataset has {} classes",
                cfg.model.num_classes,
                data.vocab.len()
            ),
        ));
    }
    if let Some(s) = data
        .train
        .iter()
        .chain(&data.val)
        .chain(&data.test)
        .find(|s| s.seq_len() != cfg.model.seq_len)
    {
        return Err(config_error(
            "seq_len",
            format!(
                "is {} but the dataset was prepared with {}",
                cfg.model.seq_len,
                s.seq_len()
            ),
        ));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid(
            "the dataset needs non-empty train and val splits",
        ));
    }
    Ok(())
}

/// Trains per `cfg`, optionally resuming from a checkpoint. Progress lines go
/// to `log` as well as `train.log`.
pub fn train(
    cfg: &ExperimentConfig,
    resume: Option<&Path>,
    log: &mut dyn Write,
) -> Result<RunSummary> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.data_dir)?;
    check_dataset(cfg, &data)?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, &data, resume, log),
        Precision::F64 => train_typed::<f64>(cfg, &data, resume, log),
    }
}

fn timestamp() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn train_typed<T: Real>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    resume: Option<&Path>,
    log: &mut dyn Write,
) -> Result<RunSummary> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mut file_log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(LOG_FILE))?;
    let mut say = |line: String| -> Result<()> {
        writeln!(file_log, "[{:.3}] {line}", timestamp())?;
        writeln!(log, "{line}")?;
        Ok(())
    };

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<T>::load_expecting(path, &cfg.model)?;
            let mut t = ckpt.into_trainer()?;
            if t.config.seed != cfg.train.seed {
                return Err(config_error(
                    "seed",
                    format!(
                        "is {} in the checkpoint but {} in the config",
                        t.config.seed, cfg.train.seed
                    ),
                ));
            }
            t.config = cfg.train.clone();
            say(format!(
                "resuming from {} at epoch {}",
                path.display(),
                t.progress.epoch
            ))?;
            t
        }
        None => Trainer::new(
            Model::<T>::new(cfg.model.clone(), cfg.train.seed)?,
            cfg.train.clone(),
        )?,
    };
    say(format!(
        "training on {} samples, validating on {}, {} parameters",
        data.train.len(),
        data.val.len(),
        crate::model::group_digits(crate::model::count_parameters(&cfg.model).total)
    ))?;

    let best = trainer.fit(&data.train, &data.val, |t, m, improved| {
        std::fs::write(out.join(METRICS_FILE), metrics_csv(&t.progress.history))?;
        Checkpoint::from_trainer(t).save(&out.join(LAST_CKPT))?;
        if improved {
            Checkpoint::from_trainer(t).save(&out.join(BEST_CKPT))?;
        }
        say(format!(
            "epoch {} lr {:.3e} loss {:.4} val acc@1 {:.4} acc@5 {:.4} acc@10 {:.4} ({:.1}s){}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.val_acc1,
            m.val_acc5,
            m.val_acc10,
            m.seconds,
            if improved { " *" } else { "" }
        ))
    })?;
    std::fs::write(
        out.join(METRICS_FILE),
        metrics_csv(&trainer.progress.history),
    )?;

    let best = match best {
        Some(m) => m,
        None => Checkpoint::<T>::load(&out.join(BEST_CKPT))?.model,
    };
    let test = if data.test.is_empty() {
        None
    } else {
        let r = evaluate(&best, &data.test, trainer.config.batch_size)?;
        say(format!(
            "test acc@1 {:.4} acc@5 {:.4} acc@10 {:.4}",
            r.acc1, r.acc5, r.acc10
        ))?;
        Some(r)
    };
    let p = &trainer.progress;
    Ok(RunSummary {
        epochs: p.history.len(),
        best_epoch: p.best_epoch,
        best_val_acc1: p.best_val_acc1,
        test,
    })
}

/// Model weights from a checkpoint of either precision, as `f64`.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(match peek_precision(path)? {
            Precision::F32 => AnyModel::F32(Checkpoint::<f32>::load(path)?.model),
            Precision::F64 => AnyModel::F64(Checkpoint::<f64>::load(path)?.model),
        })
    }

    pub fn config(&self) -> &crate::model::MgtConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }

    pub fn evaluate(&self, samples: &[SketchTensor], batch_size: usize) -> Result<EvalReport> {
        match self {
            AnyModel::F32(m) => evaluate(m, samples, batch_size),
            AnyModel::F64(m) => evaluate(m, samples, batch_size),
        }
    }

    pub fn attention_maps(&self, sample: &SketchTensor) -> Result<crate::model::AttentionMaps> {
        match self {
            AnyModel::F32(m) => m.attention_maps(sample),
            AnyModel::F64(m) => m.attention_maps(sample),
        }
    }
}
