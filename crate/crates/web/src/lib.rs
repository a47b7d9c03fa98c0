//! WebAssembly bindings for the browser demo.
//!
//! Every export takes and returns JSON text. The `*_json` functions hold the
//! logic and are usable natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

use sketch_mgt::graph::GraphSpec;
use sketch_mgt::model::{count_parameters, MaskMode, MgtConfig, Model};
use sketch_mgt::sketch_data::{to_sketch_tensor, Flag, Point, RawDrawing, SketchTensor};
use sketch_mgt::synth::SynthClasses;
use sketch_mgt::tensor::rng_for;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse_drawing(drawing: &str, seq_len: usize) -> Result<SketchTensor, String> {
    let strokes: Vec<Vec<[f64; 2]>> = serde_json::from_str(drawing).map_err(err)?;
    let strokes: Vec<Vec<Point>> = strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|p| {
                    (
                        p[0].round().clamp(0.0, 255.0) as u8,
                        p[1].round().clamp(0.0, 255.0) as u8,
                    )
                })
                .collect()
        })
        .collect();
    let raw = RawDrawing::new(strokes, "drawing").map_err(err)?;
    to_sketch_tensor(&raw, seq_len, 0).map_err(err)
}

/// Key points of a drawing after flattening, truncation and padding.
pub fn sketch_json(drawing: &str, seq_len: usize) -> Result<String, String> {
    let t = parse_drawing(drawing, seq_len)?;
    let n = t.true_len;
    Ok(json!({
        "points": &t.coords[..n],
        "stroke_ends": (0..n).filter(|&i| t.flags[i] == Flag::StrokeEnd).collect::<Vec<_>>(),
        "true_len": n,
        "original_len": t.original_len,
    })
    .to_string())
}

/// Edges between real key points of one graph spec, e.g. `khop:2`.
pub fn graph_json(
    drawing: &str,
    spec: &str,
    seq_len: usize,
    self_loops: bool,
) -> Result<String, String> {
    let t = parse_drawing(drawing, seq_len)?;
    let spec: GraphSpec = spec.parse().map_err(err)?;
    let adj = spec.build(&t, self_loops, 0).map_err(err)?;
    let n = t.true_len;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if adj.get(i, j) {
                edges.push([i, j]);
            }
        }
    }
    let entries = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| adj.get(i, j))
        .count();
    Ok(json!({
        "size": n,
        "edges": edges,
        "density": if n == 0 { 0.0 } else { entries as f64 / (n * n) as f64 },
    })
    .to_string())
}

#[derive(Serialize)]
struct HeadView {
    graph: String,
    head: usize,
    /// Row-major `n x n` crop over real key points.
    weights: Vec<f64>,
}

/// First-layer attention of a randomly initialised model over the drawing.
pub fn attention_json(
    drawing: &str,
    graphs: &str,
    mask_mode: &str,
    seed: u64,
) -> Result<String, String> {
    let seq_len = 100;
    let t = parse_drawing(drawing, seq_len)?;
    let graph_specs = GraphSpec::parse_list(graphs).map_err(err)?;
    let cfg = MgtConfig {
        seq_len,
        d_hat: 16,
        layers: 1,
        heads_per_graph: 2,
        graph_specs: graph_specs.clone(),
        mask_mode: mask_mode.parse::<MaskMode>().map_err(err)?,
        num_classes: 10,
        ..MgtConfig::default()
    };
    let model = Model::<f32>::new(cfg, seed).map_err(err)?;
    let maps = model.attention_maps(&t).map_err(err)?;
    let n = t.true_len;
    let heads: Vec<HeadView> = maps
        .maps
        .iter()
        .map(|m| HeadView {
            graph: graph_specs[m.graph].to_string(),
            head: m.head,
            weights: (0..n)
                .flat_map(|i| m.values[i * m.size..i * m.size + n].iter().copied())
                .collect(),
        })
        .collect();
    Ok(json!({ "size": n, "heads": heads }).to_string())
}

/// Parameter count with a per-block breakdown.
pub fn params_json(
    d_hat: usize,
    layers: usize,
    heads: usize,
    graphs: &str,
    classes: usize,
) -> Result<String, String> {
    let cfg = MgtConfig {
        d_hat,
        layers,
        heads_per_graph: heads,
        graph_specs: GraphSpec::parse_list(graphs).map_err(err)?,
        num_classes: classes,
        ..MgtConfig::default()
    };
    cfg.validate().map_err(err)?;
    let count = count_parameters(&cfg);
    let blocks: Vec<(String, usize)> = count
        .blocks
        .iter()
        .map(|(b, n)| (b.name().to_string(), *n))
        .collect();
    Ok(json!({ "total": count.total, "blocks": blocks }).to_string())
}

/// A random synthetic drawing of one of `classes` stroke-primitive classes.
pub fn synth_json(seed: u64, classes: usize) -> Result<String, String> {
    let catalogue = SynthClasses::new(classes, 3, 0).map_err(err)?;
    let mut rng = rng_for(seed, 0);
    let class = (seed as usize) % catalogue.len();
    let d = catalogue.draw(class, &mut rng).map_err(err)?;
    let strokes: Vec<Vec<[u8; 2]>> = d
        .strokes()
        .iter()
        .map(|s| s.iter().map(|p| [p.0, p.1]).collect())
        .collect();
    Ok(json!({ "name": catalogue.name(class), "strokes": strokes }).to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sketch(drawing: &str, seq_len: usize) -> Result<String, JsError> {
    js(sketch_json(drawing, seq_len))
}

#[wasm_bindgen]
pub fn graph(
    drawing: &str,
    spec: &str,
    seq_len: usize,
    self_loops: bool,
) -> Result<String, JsError> {
    js(graph_json(drawing, spec, seq_len, self_loops))
}

#[wasm_bindgen]
pub fn attention(
    drawing: &str,
    graphs: &str,
    mask_mode: &str,
    seed: u32,
) -> Result<String, JsError> {
    js(attention_json(drawing, graphs, mask_mode, seed as u64))
}

#[wasm_bindgen]
pub fn params(
    d_hat: usize,
    layers: usize,
    heads: usize,
    graphs: &str,
    classes: usize,
) -> Result<String, JsError> {
    js(params_json(d_hat, layers, heads, graphs, classes))
}

#[wasm_bindgen]
pub fn synth(seed: u32, classes: usize) -> Result<String, JsError> {
    js(synth_json(seed as u64, classes))
}
