use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sketch_mgt::config::{ExperimentConfig, DATA_DIR_ENV, KEYS};
use sketch_mgt::gradcheck::{model_suite, op_suite, tiny_model_config, GradCheckReport, TOLERANCE};
use sketch_mgt::model::{count_parameters, group_digits, MgtConfig};
use sketch_mgt::prepare::{prepare, Dataset, PrepareOptions};
use sketch_mgt::run::{self, AnyModel};
use sketch_mgt::sketch_data::SplitCounts;
use sketch_mgt::synth::SynthClasses;
use sketch_mgt::Error;

#[derive(Parser)]
#[command(
    name = "sketchmgt",
    version,
    about = "Multi-graph transformer for free-hand sketch recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Base,
    Large,
}

#[derive(Subcommand)]
enum Command {
    /// Sample, split and convert raw ndjson drawings into a dataset directory.
    Prepare {
        /// Raw ndjson files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Output dataset directory.
        #[arg(long, env = DATA_DIR_ENV)]
        out: PathBuf,
        /// Comma-separated class names, or `all`.
        #[arg(long, default_value = "all")]
        classes: String,
        /// Samples per class as `train,val,test`.
        #[arg(long, default_value = "1000,100,100")]
        per_class: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        seq_len: usize,
        /// Malformed input lines tolerated before failing.
        #[arg(long, default_value_t = 10)]
        max_malformed: usize,
    },
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print top-1/5/10 accuracy of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Export per-head attention maps of one sample as CSV files.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample_index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory.
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the parameter count with a per-block breakdown.
    Params {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Model config to check instead of the built-in tiny one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic ndjson corpus of class-structured drawings.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        /// Primitive strokes per drawing.
        #[arg(long, default_value_t = 3)]
        parts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List config file keys.
    Keys,
}

/// A failure and its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::UnknownLabel(_) | Error::InvalidArgument(_) => 2,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| usage(anyhow::anyhow!("{}: {e}", path.display())))
}

fn cmd_prepare(
    input: Vec<PathBuf>,
    out: PathBuf,
    classes: String,
    per_class: String,
    seed: u64,
    seq_len: usize,
    max_malformed: usize,
) -> CmdResult {
    let per_class: SplitCounts = per_class
        .parse()
        .map_err(|e: String| usage(anyhow::anyhow!("--per-class: {e}")))?;
    let opts = PrepareOptions {
        classes: classes.parse()?,
        per_class,
        seed,
        seq_len,
        max_malformed,
    };
    if seq_len == 0 {
        return Err(usage(anyhow::anyhow!("--seq-len must be positive")));
    }
    let report = prepare(&input, &out, &opts)?;
    for e in &report.errors {
        eprintln!("warning: {e}");
    }
    println!(
        "read {} lines ({} malformed), kept {} classes",
        report.lines,
        report.malformed,
        report.vocab.len()
    );
    print!("{}", report.stats);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(config: PathBuf, resume: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(&config)?;
    let s = run::train(&cfg, resume.as_deref(), &mut std::io::stdout())?;
    println!(
        "finished after {} epochs; best val acc@1 {:.4} at epoch {}",
        s.epochs,
        s.best_val_acc1,
        s.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    Ok(())
}

fn cmd_eval(ckpt: PathBuf, data: PathBuf, split: String, batch_size: usize) -> CmdResult {
    let model = AnyModel::load(&ckpt)?;
    let ds = Dataset::load(&data)?;
    let samples = ds.split(&split)?;
    let r = model.evaluate(samples, batch_size)?;
    println!("samples {}", r.samples);
    println!("acc@1  {:.4}", r.acc1);
    println!("acc@5  {:.4}", r.acc5);
    println!("acc@10 {:.4}", r.acc10);
    if r.tied_top > 0 {
        println!(
            "note: {} sample(s) have tied top logits; ties are broken towards the lower class index",
            r.tied_top
        );
    }
    Ok(())
}

fn cmd_attn(
    ckpt: PathBuf,
    sample_index: usize,
    out: PathBuf,
    data: PathBuf,
    split: String,
) -> CmdResult {
    let model = AnyModel::load(&ckpt)?;
    let ds = Dataset::load(&data)?;
    let samples = ds.split(&split)?;
    let sample = samples.get(sample_index).ok_or_else(|| {
        usage(anyhow::anyhow!(
            "--sample-index {sample_index} is out of range; the {split} split has {} samples",
            samples.len()
        ))
    })?;
    let maps = model.attention_maps(sample)?;
    maps.write(&out, sample, Some(ds.vocab.names()))?;
    println!(
        "wrote {} attention maps to {}",
        maps.maps.len(),
        out.display()
    );
    Ok(())
}

fn cmd_params(config: Option<PathBuf>, preset: Option<Preset>) -> CmdResult {
    let cfg = match (config, preset) {
        (Some(p), _) => load_config(&p)?.model,
        (None, Some(Preset::Large)) => MgtConfig::large(),
        (None, _) => MgtConfig::base(),
    };
    let count = count_parameters(&cfg);
    println!("{count}");
    println!("total {}", group_digits(count.total));
    Ok(())
}

fn print_reports(reports: &[(String, GradCheckReport)]) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, r) in reports {
        println!(
            "{:<40} max rel-err {:.3e} over {} entries{}",
            name,
            r.max_rel_err,
            r.checked,
            if r.passes(TOLERANCE) { "" } else { "  FAIL" }
        );
        worst = worst.max(r.max_rel_err);
    }
    worst
}

fn cmd_gradcheck(config: Option<PathBuf>, batch_size: usize, seed: u64) -> CmdResult {
    let cfg = match config {
        Some(p) => load_config(&p)?.model,
        None => tiny_model_config(),
    };
    println!("ops:");
    let ops = print_reports(&op_suite()?);
    println!("model:");
    let model = print_reports(&model_suite(&cfg, batch_size, seed)?);
    let worst = ops.max(model);
    println!("max rel-err {worst:.3e} (tolerance {TOLERANCE:.0e})");
    if worst < TOLERANCE {
        Ok(())
    } else {
        Err(anyhow::anyhow!("gradient check failed").into())
    }
}

fn cmd_synth(out: PathBuf, classes: usize, per_class: usize, parts: usize, seed: u64) -> CmdResult {
    let catalogue = SynthClasses::new(classes, parts, seed)?;
    catalogue.write_ndjson(per_class, seed, &out)?;
    println!(
        "wrote {} drawings of {} classes to {}",
        classes * per_class,
        classes,
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            input,
            out,
            classes,
            per_class,
            seed,
            seq_len,
            max_malformed,
        } => cmd_prepare(input, out, classes, per_class, seed, seq_len, max_malformed),
        Command::Train { config, resume } => cmd_train(config, resume),
        Command::Eval {
            ckpt,
            data,
            split,
            batch_size,
        } => cmd_eval(ckpt, data, split, batch_size),
        Command::Attn {
            ckpt,
            sample_index,
            out,
            data,
            split,
        } => cmd_attn(ckpt, sample_index, out, data, split),
        Command::Params { config, preset } => cmd_params(config, preset),
        Command::Gradcheck {
            config,
            batch_size,
            seed,
        } => cmd_gradcheck(config, batch_size, seed),
        Command::Synth {
            out,
            classes,
            per_class,
            parts,
            seed,
        } => cmd_synth(out, classes, per_class, parts, seed),
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<16} {doc}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
