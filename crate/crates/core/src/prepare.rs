//! Raw drawings to a prepared, split dataset directory.
//!
//! A dataset directory holds `labels.txt`, `train.jsonl`, `val.jsonl`,
//! `test.jsonl` and a `stats.txt` report.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch_data::{
    parse_drawing_line, read_dataset, split_dataset, to_sketch_tensor, write_dataset, DatasetSplit,
    LabelVocabulary, RawDrawing, SketchTensor, SplitCounts, SplitStatsTable,
};
use crate::tensor::{rng_for, Rng};

pub const LABELS_FILE: &str = "labels.txt";
pub const STATS_FILE: &str = "stats.txt";

/// Which classes to keep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassFilter {
    All,
    Only(Vec<String>),
}

impl std::str::FromStr for ClassFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(ClassFilter::All);
        }
        let names: Vec<String> = s
            .split(',')
            .map(|n| n.trim().to_string())
            .filter(|n| !n.is_empty())
            .collect();
        if names.is_empty() {
            return Err(Error::invalid("empty class list"));
        }
        Ok(ClassFilter::Only(names))
    }
}

impl std::fmt::Display for ClassFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassFilter::All => f.write_str("all"),
            ClassFilter::Only(v) => f.write_str(&v.join(",")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub classes: ClassFilter,
    pub per_class: SplitCounts,
    pub seed: u64,
    pub seq_len: usize,
    /// Malformed lines tolerated before the run fails.
    pub max_malformed: usize,
}

#[derive(Debug)]
pub struct PrepareReport {
    pub lines: usize,
    pub malformed: usize,
    /// First few parse errors, for diagnostics.
    pub errors: Vec<String>,
    pub vocab: LabelVocabulary,
    pub stats: SplitStatsTable,
}

/// Uniform fixed-size sample of a stream (Algorithm R).
struct Reservoir {
    seen: usize,
    items: Vec<RawDrawing>,
    rng: Rng,
}

impl Reservoir {
    fn offer(&mut self, d: RawDrawing, cap: usize) {
        self.seen += 1;
        if self.items.len() < cap {
            self.items.push(d);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if j < cap {
                self.items[j] = d;
            }
        }
    }
}

/// Files named directly, plus every `*.ndjson` inside named directories
/// (sorted by name).
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ndjson"))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("input `{}` does not exist", p.display()),
            )));
        }
    }
    Ok(out)
}

/// Reads raw drawings, samples each class, splits, and writes `out_dir`.
pub fn prepare(inputs: &[PathBuf], out_dir: &Path, opts: &PrepareOptions) -> Result<PrepareReport> {
    let files = expand_inputs(inputs)?;
    let cap = opts.per_class.total();
    let wanted: Option<Vec<&String>> = match &opts.classes {
        ClassFilter::All => None,
        ClassFilter::Only(v) => Some(v.iter().collect()),
    };
    let mut pools: BTreeMap<String, Reservoir> = BTreeMap::new();
    let (mut lines, mut malformed, mut errors) = (0, 0, Vec::new());
    for file in &files {
        let reader = std::io::BufReader::new(std::fs::File::open(file)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            lines += 1;
            let d = match parse_drawing_line(&line, i + 1) {
                Ok(d) => d,
                Err(e) => {
                    malformed += 1;
                    if errors.len() < 10 {
                        errors.push(format!("{}: {e}", file.display()));
                    }
                    if malformed > opts.max_malformed {
                        return Err(Error::Parse {
                            line: i + 1,
                            msg: format!(
                                "{}: {malformed} malformed line(s), more than the {} allowed; first: {}",
                                file.display(),
                                opts.max_malformed,
                                errors[0]
                            ),
                        });
                    }
                    continue;
                }
            };
            if wanted
                .as_ref()
                .is_some_and(|w| !w.iter().any(|n| *n == d.label()))
            {
                continue;
            }
            let key = d.label().to_string();
            let next = pools.len() as u64;
            let pool = pools.entry(key).or_insert_with(|| Reservoir {
                seen: 0,
                items: Vec::new(),
                rng: rng_for(opts.seed, 0x7e5e_0000 + next),
            });
            pool.offer(d, cap);
        }
    }
    if let Some(w) = &wanted {
        for name in w {
            if !pools.contains_key(*name) {
                return Err(Error::UnknownLabel((*name).clone()));
            }
        }
    }
    if pools.is_empty() {
        return Err(Error::invalid("no drawings found in the input"));
    }
    let vocab = LabelVocabulary::from_names(pools.keys().cloned());
    let mut samples = Vec::with_capacity(pools.len() * cap);
    for (name, pool) in &pools {
        let label = vocab.index_of(name)?;
        for d in &pool.items {
            samples.push(to_sketch_tensor(d, opts.seq_len, label)?);
        }
    }
    let split = split_dataset(samples, opts.per_class, opts.seed, &vocab)?;
    let stats = SplitStatsTable::for_split(&split)?;
    write_split(out_dir, &vocab, &split, &stats)?;
    Ok(PrepareReport {
        lines,
        malformed,
        errors,
        vocab,
        stats,
    })
}

fn write_split(
    out_dir: &Path,
    vocab: &LabelVocabulary,
    split: &DatasetSplit,
    stats: &SplitStatsTable,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    vocab.save(&out_dir.join(LABELS_FILE))?;
    write_dataset(&out_dir.join("train.jsonl"), &split.train)?;
    write_dataset(&out_dir.join("val.jsonl"), &split.val)?;
    write_dataset(&out_dir.join("test.jsonl"), &split.test)?;
    std::fs::write(out_dir.join(STATS_FILE), stats.to_string())?;
    Ok(())
}

/// A prepared dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: LabelVocabulary,
    pub train: Vec<SketchTensor>,
    pub val: Vec<SketchTensor>,
    pub test: Vec<SketchTensor>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = LabelVocabulary::load(&dir.join(LABELS_FILE))?;
        let read = |name: &str| -> Result<Vec<SketchTensor>> {
            let p = dir.join(name);
            if p.exists() {
                read_dataset(&p)
            } else {
                Ok(Vec::new())
            }
        };
        let ds = Dataset {
            train: read("train.jsonl")?,
            val: read("val.jsonl")?,
            test: read("test.jsonl")?,
            vocab,
        };
        if let Some(bad) = ds
            .train
            .iter()
            .chain(&ds.val)
            .chain(&ds.test)
            .find(|s| s.label >= ds.vocab.len())
        {
            return Err(Error::IndexOutOfRange {
                index: bad.label,
                size: ds.vocab.len(),
            });
        }
        Ok(ds)
    }

    pub fn split(&self, name: &str) -> Result<&[SketchTensor]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::invalid(format!(
                "unknown split `{other}` (train, val or test)"
            ))),
        }
    }
}
