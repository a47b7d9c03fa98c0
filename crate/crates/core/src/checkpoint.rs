//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "SKMGTCKP"
//! version u32
//! header  u64 length + UTF-8 JSON (configs, progress, optimizer and rng state)
//! count   u32
//! record  u32 name length, name, u8 precision tag, u32 rank,
//!         u64 per dimension, raw little-endian values
//! ```
//!
//! Records are parameters (`param/<name>`), batch-norm running statistics
//! (`bn/<site>/mean`, `bn/<site>/var`) and Adam moments (`adam/m/<name>`,
//! `adam/v/<name>`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MgtConfig, Model};
use crate::tensor::{BatchNormState, Precision, Real, Rng, Tensor};
use crate::train::{AdamState, Progress, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"SKMGTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, as a decimal string because it is 128-bit.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        use rand::SeedableRng;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: MgtConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    pub adam_step: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub rng: RngState,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub model: Model<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        Self::with_model(trainer, trainer.model.clone())
    }

    /// Trainer state paired with a different set of weights (e.g. the best
    /// epoch's model).
    pub fn with_model(trainer: &Trainer<T>, model: Model<T>) -> Self {
        Checkpoint {
            header: Header {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                train: trainer.config.clone(),
                progress: trainer.progress.clone(),
                adam_step: trainer.adam.step,
                adam_betas: (trainer.adam.beta1, trainer.adam.beta2),
                adam_eps: trainer.adam.eps,
                rng: RngState::capture(&trainer.rng),
            },
            model,
            adam: trainer.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let mut trainer = Trainer::new(self.model, self.header.train.clone())?;
        trainer.adam = self.adam;
        trainer.rng = self.header.rng.restore()?;
        trainer.progress = self.header.progress;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        let layout = self.model.layout();
        let mut records: Vec<(String, &Tensor<T>)> = Vec::new();
        for (slot, p) in layout.slots().iter().zip(self.model.params()) {
            records.push((format!("param/{}", slot.name), p));
        }
        let d = self.model.config().d();
        let bn: Vec<(String, Tensor<T>, Tensor<T>)> = layout
            .bn_names()
            .iter()
            .zip(self.model.bn_states())
            .map(|(name, s)| {
                let mean = Tensor::new(vec![d], s.mean.clone());
                let var = Tensor::new(vec![d], s.var.clone());
                Ok((name.clone(), mean?, var?))
            })
            .collect::<Result<_>>()?;
        for (name, mean, var) in &bn {
            records.push((format!("bn/{name}/mean"), mean));
            records.push((format!("bn/{name}/var"), var));
        }
        for (slot, (m, v)) in layout
            .slots()
            .iter()
            .zip(self.adam.m.iter().zip(&self.adam.v))
        {
            records.push((format!("adam/m/{}", slot.name), m));
            records.push((format!("adam/v/{}", slot.name), v));
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            write_record(&mut out, &name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut records = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let (name, t) = read_record::<T>(&mut r)?;
            records.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }

        let config = header.model.clone();
        config.validate()?;
        let layout = crate::model::Layout::new(&config);
        let mut take = |name: String| {
            records
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
        };
        let params = layout
            .slots()
            .iter()
            .map(|s| take(format!("param/{}", s.name)))
            .collect::<Result<Vec<_>>>()?;
        let mut bn = Vec::new();
        for name in layout.bn_names() {
            let mut st = BatchNormState::new(config.d());
            st.mean = take(format!("bn/{name}/mean"))?.into_data();
            st.var = take(format!("bn/{name}/var"))?.into_data();
            bn.push(st);
        }
        let mut adam = AdamState::<T>::new(&params);
        for (i, s) in layout.slots().iter().enumerate() {
            adam.m[i] = take(format!("adam/m/{}", s.name))?;
            adam.v[i] = take(format!("adam/v/{}", s.name))?;
            if adam.m[i].shape() != s.shape.as_slice() || adam.v[i].shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments of `{}` have the wrong shape",
                    s.name
                )));
            }
        }
        adam.step = header.adam_step;
        (adam.beta1, adam.beta2) = header.adam_betas;
        adam.eps = header.adam_eps;
        if let Some(extra) = records.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected record `{extra}`")));
        }
        let model = Model::from_parts(config, params, bn)?;
        Ok(Checkpoint {
            header,
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks that the stored model configuration equals `expected`.
    pub fn load_expecting(path: &Path, expected: &MgtConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let diff = config_diff(&ck.header.model, expected);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for a different model: {}",
                diff.join(", ")
            )));
        }
        Ok(ck)
    }
}

/// Precision tag of a checkpoint file without decoding its tensors.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    r.u32()?;
    let len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    Ok(header.train.precision)
}

/// Human-readable list of differing fields.
pub fn config_diff(found: &MgtConfig, expected: &MgtConfig) -> Vec<String> {
    let (a, b) = match (serde_json::to_value(found), serde_json::to_value(expected)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return vec!["unserializable config".into()],
    };
    let mut out = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            let vb = b.get(k);
            if vb != Some(va) {
                out.push(format!(
                    "{k} is {va} in the checkpoint but {} in the config",
                    vb.map_or("missing".to_string(), ToString::to_string)
                ));
            }
        }
    }
    out
}

fn write_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::PRECISION.tag());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_record<T: Real>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let n = r.u32()? as usize;
    let name = String::from_utf8(r.take(n)?.to_vec())
        .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
    let tag = r.take(1)?[0];
    let precision = Precision::from_tag(tag)
        .ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown precision tag {tag}")))?;
    if precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "`{name}` is stored as {precision}, requested {}",
            T::PRECISION
        )));
    }
    let rank = r.u32()? as usize;
    let shape = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    let width = usize::from(tag);
    let raw = r.take(
        count
            .checked_mul(width)
            .ok_or_else(|| Error::Checkpoint("record too large".into()))?,
    )?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
    Ok((name, t))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphSpec;
    use crate::sketch_data::{synthesize_sketch, to_sketch_tensor, SketchTensor};
    use crate::tensor::rng_for;
    use crate::train::evaluate;

    fn setup() -> (Trainer<f32>, Vec<SketchTensor>) {
        let cfg = MgtConfig {
            seq_len: 10,
            d_hat: 4,
            layers: 1,
            heads_per_graph: 2,
            graph_specs: vec![GraphSpec::KHop(1), GraphSpec::Global],
            num_classes: 3,
            ..MgtConfig::default()
        };
        let mut rng = rng_for(3, 3);
        let data: Vec<SketchTensor> = (0..6)
            .map(|i| {
                to_sketch_tensor(&synthesize_sketch(&mut rng, 2, 2..=5).unwrap(), 10, i % 3)
                    .unwrap()
            })
            .collect();
        let tc = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            patience: 3,
            initial_lr: 1e-2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(Model::new(cfg, 1).unwrap(), tc).unwrap();
        trainer.run_epoch(&data, &data).unwrap();
        (trainer, data)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (trainer, data) = setup();
        let ck = Checkpoint::from_trainer(&trainer);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, trainer.model);
        assert_eq!(back.adam, trainer.adam);
        assert_eq!(back.header, ck.header);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(
            evaluate(&back.model, &data, 4).unwrap(),
            evaluate(&trainer.model, &data, 4).unwrap()
        );
        let mut resumed = back.into_trainer().unwrap();
        assert_eq!(resumed.rng, trainer.rng);
        let mut original = trainer.clone();
        resumed.run_epoch(&data, &data).unwrap();
        original.run_epoch(&data, &data).unwrap();
        assert_eq!(resumed.model, original.model);
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let (trainer, _) = setup();
        let bytes = Checkpoint::from_trainer(&trainer).to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(peek_precision(&path).unwrap(), Precision::F32);
        let other = MgtConfig {
            d_hat: 8,
            ..trainer.model.config().clone()
        };
        let err = Checkpoint::<f32>::load_expecting(&path, &other)
            .unwrap_err()
            .to_string();
        assert!(err.contains("d_hat is 4 in the checkpoint but 8"), "{err}");
        assert!(Checkpoint::<f32>::load_expecting(&path, trainer.model.config()).is_ok());
    }
}
