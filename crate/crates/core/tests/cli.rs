use std::path::Path;
use std::process::{Command, Output};

use sketch_mgt::checkpoint::Checkpoint;
use sketch_mgt::model::{MgtConfig, Model};
use sketch_mgt::sketch_data::{
    synthesize_sketch, to_sketch_tensor, write_dataset, LabelVocabulary,
};
use sketch_mgt::tensor::{rng_for, Precision};
use sketch_mgt::train::{TrainConfig, Trainer};

fn sketchmgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchmgt"))
        .args(args)
        .env_remove("SKETCHMGT_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn params_prints_the_base_count() {
    let o = sketchmgt(&["params", "--preset", "base"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("10,096,601"), "{}", stdout(&o));
    let o = sketchmgt(&["params", "--preset", "large"]);
    assert!(stdout(&o).contains("39,984,729"));
}

#[test]
fn gradcheck_passes_on_the_tiny_config() {
    let o = sketchmgt(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(last.starts_with("max rel-err"), "{last}");
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = sketchmgt(&[
        "prepare",
        "--input",
        p(&dir.path().join("nowhere")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "layers = 2\nwarmup = 5\n").unwrap();
    let o = sketchmgt(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warmup"), "{}", stderr(&o));

    let o = sketchmgt(&["params", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_prepare_train_eval_attn() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.ndjson");
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = sketchmgt(&[
        "synth",
        "--out",
        p(&raw),
        "--classes",
        "2",
        "--per-class",
        "16",
        "--parts",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = sketchmgt(&[
        "prepare",
        "--input",
        p(&raw),
        "--out",
        p(&data),
        "--per-class",
        "10,2,2",
        "--seq-len",
        "32",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = |f: &str| {
        std::fs::read_to_string(data.join(f))
            .unwrap()
            .lines()
            .count()
    };
    assert_eq!(
        (
            lines("train.jsonl"),
            lines("val.jsonl"),
            lines("test.jsonl")
        ),
        (20, 4, 4)
    );
    assert_eq!(lines("labels.txt"), 2);
    assert!(stdout(&o).contains("Training"));

    let cfg = dir.path().join("run.txt");
    std::fs::write(
        &cfg,
        format!(
            "data_dir = {}\nout_dir = {}\nseq_len = 32\nd_hat = 4\nlayers = 1\nheads_per_graph = 2\nnum_classes = 2\nmax_epochs = 2\nbatch_size = 8\nlr = 1e-3\n",
            p(&data),
            p(&run)
        ),
    )
    .unwrap();
    let o = sketchmgt(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "epoch,lr,train_loss,val_acc1,val_acc5,val_acc10,seconds"
    );
    assert_eq!(metrics.lines().count(), 3);

    let o = sketchmgt(&[
        "train",
        "--config",
        p(&run.join("config.txt")),
        "--resume",
        p(&run.join("last.ckpt")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ckpt = run.join("best.ckpt");
    let o = sketchmgt(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("acc@1"));
    assert!(stdout(&o).contains("acc@10"));

    let attn = dir.path().join("attn");
    let o = sketchmgt(&[
        "attn",
        "--ckpt",
        p(&ckpt),
        "--sample-index",
        "1",
        "--out",
        p(&attn),
        "--data",
        p(&data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // One layer, three graphs, two heads each.
    let csvs = std::fs::read_dir(&attn)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv")
        .count();
    assert_eq!(csvs, 6);
    assert!(attn.join("manifest.json").exists());
    let o = sketchmgt(&[
        "attn",
        "--ckpt",
        p(&ckpt),
        "--sample-index",
        "99",
        "--out",
        p(&attn),
        "--data",
        p(&data),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_of_a_zero_model_is_chance_with_a_tie_note() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let classes = 345;
    let vocab = LabelVocabulary::from_names((0..classes).map(|i| format!("class{i:03}")));
    vocab.save(&data.join("labels.txt")).unwrap();
    let mut rng = rng_for(1, 1);
    let samples: Vec<_> = (0..classes)
        .map(|c| to_sketch_tensor(&synthesize_sketch(&mut rng, 2, 3..=6).unwrap(), 16, c).unwrap())
        .collect();
    write_dataset(&data.join("test.jsonl"), &samples).unwrap();

    let cfg = MgtConfig {
        seq_len: 16,
        d_hat: 4,
        layers: 1,
        heads_per_graph: 1,
        num_classes: classes,
        ..MgtConfig::default()
    };
    let mut model = Model::<f32>::new(cfg, 0).unwrap();
    for t in model.params_mut() {
        t.data_mut().fill(0.0);
    }
    let trainer = Trainer::new(
        model,
        TrainConfig {
            precision: Precision::F32,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    Checkpoint::from_trainer(&trainer).save(&ckpt).unwrap();

    let o = sketchmgt(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let acc1: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("acc@1"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((acc1 - 1.0 / 345.0).abs() < 1e-4, "{out}");
    assert!(out.contains("tied top logits"), "{out}");
}
