//! Oracles and witnesses shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use sketch_mgt::model::{sample_graphs, Batch, MaskMode, MgtConfig, Model};
use sketch_mgt::sketch_data::{synthesize_sketch, to_sketch_tensor, SketchTensor};
use sketch_mgt::tensor::{rng_for, Mode, Tape, Tensor};

pub fn random_sketch(seed: u64, s: usize) -> SketchTensor {
    let mut rng = rng_for(seed, 0);
    let strokes = 1 + (seed % 6) as usize;
    let d = synthesize_sketch(&mut rng, strokes, 1..=20).unwrap();
    to_sketch_tensor(&d, s, 0).unwrap()
}

/// Shortest path length along the stroke polylines, by breadth-first search.
fn stroke_distance(t: &SketchTensor, from: usize) -> Vec<Option<usize>> {
    let n = t.true_len;
    let mut dist = vec![None; n];
    dist[from] = Some(0);
    let mut frontier = vec![from];
    let mut d = 0;
    while !frontier.is_empty() {
        d += 1;
        let mut next = Vec::new();
        for &u in &frontier {
            for v in [u.wrapping_sub(1), u + 1] {
                if v < n && dist[v].is_none() && t.stroke_ids[v] == t.stroke_ids[u] {
                    dist[v] = Some(d);
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    dist
}

pub fn khop_oracle(t: &SketchTensor, k: usize) -> Vec<bool> {
    let s = t.seq_len();
    let mut out = vec![false; s * s];
    for i in 0..s {
        out[i * s + i] = true;
    }
    for i in 0..t.true_len {
        for (j, d) in stroke_distance(t, i).into_iter().enumerate() {
            if d.is_some_and(|d| d <= k) {
                out[i * s + j] = true;
            }
        }
    }
    out
}

/// Links the last point of each stroke to the first point of the next.
pub fn global_oracle(t: &SketchTensor) -> Vec<bool> {
    let s = t.seq_len();
    let mut out = vec![false; s * s];
    for i in 0..s {
        out[i * s + i] = true;
    }
    let real = &t.stroke_ids[..t.true_len];
    let last_stroke = *real.last().unwrap();
    for sid in 0..last_stroke {
        let end = real.iter().rposition(|&x| x == sid);
        let start = real.iter().position(|&x| x == sid + 1);
        if let (Some(a), Some(b)) = (end, start) {
            out[a * s + b] = true;
            out[b * s + a] = true;
        }
    }
    out
}

pub fn sketch(seed: u64, s: usize, label: usize) -> SketchTensor {
    let mut rng = rng_for(seed, 3);
    let d = synthesize_sketch(&mut rng, 2 + (seed % 3) as usize, 2..=6).unwrap();
    to_sketch_tensor(&d, s, label).unwrap()
}

pub fn small(mode: MaskMode) -> MgtConfig {
    MgtConfig {
        seq_len: 16,
        d_hat: 4,
        layers: 2,
        heads_per_graph: 3,
        dropout: 0.1,
        mask_mode: mode,
        num_classes: 3,
        ..MgtConfig::default()
    }
}

/// Layer-1 node features for one sample in eval mode.
pub fn layer_one(model: &Model<f64>, sample: &SketchTensor) -> Vec<f64> {
    let batch = Batch::new(model.config(), &[sample]).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mut bn = model.bn_states().to_vec();
    let act = model
        .forward_with(
            &mut tape,
            &vars,
            &mut bn,
            &batch,
            Mode::Eval,
            &mut rng_for(0, 0),
        )
        .unwrap();
    tape.value(act.layers[0]).to_f64_vec()
}

/// First real node `j` that no graph connects to node `i`.
pub fn unlinked_pair(cfg: &MgtConfig, t: &SketchTensor) -> Option<(usize, usize)> {
    let graphs = sample_graphs(cfg, t).unwrap();
    for i in 0..t.true_len {
        for j in 0..t.true_len {
            if graphs.iter().all(|g| !g.get(i, j)) {
                return Some((i, j));
            }
        }
    }
    None
}

fn moved(t: &SketchTensor, j: usize) -> SketchTensor {
    let mut m = t.clone();
    m.coords[j] = [m.coords[j][0] + 37.0, 255.0 - m.coords[j][1]];
    m
}

/// Pre-softmax masking: moving a point that no graph links to node `i` leaves
/// node `i`'s layer-1 features bit-identical. Returns the number of sketches
/// checked out of `tries`.
pub fn pre_softmax_locality(tries: u64) -> Result<usize, String> {
    let cfg = small(MaskMode::PreSoftmax);
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let d = cfg.d();
    let mut checked = 0;
    for seed in 0..tries {
        let t = sketch(seed, cfg.seq_len, 0);
        let Some((i, j)) = unlinked_pair(&cfg, &t) else {
            continue;
        };
        let (a, b) = (layer_one(&model, &t), layer_one(&model, &moved(&t, j)));
        if a[i * d..(i + 1) * d] != b[i * d..(i + 1) * d] {
            return Err(format!(
                "sketch {seed}: node {i} changed when unlinked node {j} moved"
            ));
        }
        if a[j * d..(j + 1) * d] == b[j * d..(j + 1) * d] {
            return Err(format!("sketch {seed}: moved node {j} kept its features"));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Post-softmax masking: an unlinked point still reaches node `i` through the
/// softmax denominator. Returns the largest feature change.
pub fn post_softmax_coupling() -> Result<f64, String> {
    let cfg = small(MaskMode::PostSoftmax);
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let d = cfg.d();
    let t = sketch(4, cfg.seq_len, 0);
    let (i, j) = unlinked_pair(&cfg, &t).ok_or("sketch has no unlinked pair")?;
    let (a, b) = (layer_one(&model, &t), layer_one(&model, &moved(&t, j)));
    let diff = (0..d)
        .map(|c| (a[i * d + c] - b[i * d + c]).abs())
        .fold(0.0, f64::max);
    if diff > 1e-6 {
        Ok(diff)
    } else {
        Err(format!("no coupling: change {diff:e}"))
    }
}

/// Post-softmax attention weights recomputed with plain loops as
/// `A * softmax(QK^T / sqrt(d_k))`. Returns the largest deviation.
pub fn post_softmax_weights_error() -> f64 {
    let cfg = small(MaskMode::PostSoftmax);
    let model = Model::<f64>::new(cfg.clone(), 2).unwrap();
    let t = sketch(9, cfg.seq_len, 1);
    let batch = Batch::new(&cfg, &[&t]).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mut bn = model.bn_states().to_vec();
    let act = model
        .forward_with(
            &mut tape,
            &vars,
            &mut bn,
            &batch,
            Mode::Eval,
            &mut rng_for(0, 0),
        )
        .unwrap();
    let (s, d, heads, dh) = (cfg.seq_len, cfg.d(), cfg.heads_per_graph, cfg.head_dim());
    let h = tape.value(act.embedded).to_f64_vec();
    let graphs = sample_graphs(&cfg, &t).unwrap();
    let project = |w: &Tensor<f64>| -> Vec<f64> {
        let w = w.data();
        let mut out = vec![0.0; s * d];
        for r in 0..s {
            for c in 0..d {
                out[r * d + c] = (0..d).map(|k| h[r * d + k] * w[k * d + c]).sum();
            }
        }
        out
    };
    let mut worst: f64 = 0.0;
    for (g, adj) in graphs.iter().enumerate() {
        let q = project(model.param(&format!("layer0.graph{g}.q")).unwrap());
        let k = project(model.param(&format!("layer0.graph{g}.k")).unwrap());
        let got = tape.value(act.attention[0][g]).to_f64_vec();
        for head in 0..heads {
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i * d + head * dh + c] * k[j * d + head * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|x| (x - max).exp()).sum();
                for j in 0..s {
                    let want = if adj.get(i, j) {
                        (scores[j] - max).exp() / z
                    } else {
                        0.0
                    };
                    worst = worst.max((got[(head * s + i) * s + j] - want).abs());
                }
            }
        }
    }
    worst
}
