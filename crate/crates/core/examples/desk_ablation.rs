//! Trains one configuration on synthetic class-structured sketches and prints
//! per-epoch metrics.
//!
//! ```text
//! cargo run --release --example desk_ablation -- graphs=khop:1 d_hat=16 epochs=20
//! ```

use std::time::Instant;

use sketch_mgt::graph::GraphSpec;
use sketch_mgt::model::{MgtConfig, Model};
use sketch_mgt::sketch_data::{to_sketch_tensor, SketchTensor};
use sketch_mgt::synth::SynthClasses;
use sketch_mgt::train::{TrainConfig, Trainer};

fn main() -> sketch_mgt::Result<()> {
    let mut kv = std::collections::HashMap::new();
    for arg in std::env::args().skip(1) {
        if let Some((k, v)) = arg.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str, d: &str| kv.get(k).cloned().unwrap_or_else(|| d.to_string());
    let num = |k: &str, d: &str| get(k, d).parse::<f64>().expect("numeric argument");

    let classes = num("classes", "20") as usize;
    let train_per = num("train", "200") as usize;
    let val_per = num("val", "50") as usize;
    let seq_len = num("S", "64") as usize;
    let cfg = MgtConfig {
        seq_len,
        d_hat: num("d_hat", "16") as usize,
        layers: num("layers", "2") as usize,
        heads_per_graph: num("heads", "4") as usize,
        dropout: num("dropout", "0.1"),
        graph_specs: GraphSpec::parse_list(&get("graphs", "khop:1"))?,
        num_classes: classes,
        coord_scale: num("coord_scale", "256"),
        ..MgtConfig::default()
    };
    let tc = TrainConfig {
        initial_lr: num("lr", "1e-3"),
        max_epochs: num("epochs", "20") as usize,
        patience: num("epochs", "20") as usize,
        batch_size: num("batch", "32") as usize,
        seed: num("seed", "1") as u64,
        ..TrainConfig::default()
    };
    let catalogue = SynthClasses::new(
        classes,
        num("parts", "3") as usize,
        num("data_seed", "7") as u64,
    )?
    .with_distractors(num("distractors", "0") as usize)
    .with_placement_noise(num("noise", "1"));
    let to_tensors = |per: usize, seed: u64| -> sketch_mgt::Result<Vec<SketchTensor>> {
        catalogue
            .dataset(per, seed)?
            .iter()
            .enumerate()
            .map(|(i, d)| to_sketch_tensor(d, seq_len, i / per))
            .collect()
    };
    let train = to_tensors(train_per, 1)?;
    let val = to_tensors(val_per, 2)?;
    let model = Model::<f32>::new(cfg.clone(), tc.seed)?;
    let mut trainer = Trainer::new(model, tc)?;
    let start = Instant::now();
    trainer.fit(&train, &val, |_, m, _| {
        println!(
            "epoch {:>3} loss {:.4} val@1 {:.4} val@5 {:.4} ({:.1}s, total {:.0}s)",
            m.epoch,
            m.train_loss,
            m.val_acc1,
            m.val_acc5,
            m.seconds,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    println!("best val@1 {:.4}", trainer.progress.best_val_acc1);
    Ok(())
}
