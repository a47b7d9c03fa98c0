//! The Multi-Graph Transformer classifier.
//!
//! Parameters are stored as a flat list of named tensors whose order and
//! shapes are a pure function of [`MgtConfig`] (see [`Layout`]). Linear
//! weights are stored `[in, out]`, so a layer computes `x W + b`.

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{stack_masks, AdjacencyMatrix, GraphSpec};
use crate::sketch_data::SketchTensor;
use crate::tensor::{rng_for, BatchNormState, Mask, Mode, Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Non-edges are excluded from the softmax; rows sum to one.
    #[default]
    PreSoftmax,
    /// Softmax over all nodes, then non-edges are zeroed without renormalizing.
    PostSoftmax,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pre_softmax" => Ok(MaskMode::PreSoftmax),
            "post_softmax" => Ok(MaskMode::PostSoftmax),
            other => Err(Error::invalid(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::PreSoftmax => "pre_softmax",
            MaskMode::PostSoftmax => "post_softmax",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Mgt,
    /// Position-wise feed-forward layers only, no attention.
    FfOnly,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mgt" => Ok(Variant::Mgt),
            "ff_only" => Ok(Variant::FfOnly),
            other => Err(Error::invalid(format!("unknown model variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mgt => "mgt",
            Variant::FfOnly => "ff_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgtConfig {
    pub seq_len: usize,
    pub d_hat: usize,
    pub layers: usize,
    pub heads_per_graph: usize,
    pub dropout: f64,
    pub graph_specs: Vec<GraphSpec>,
    pub mask_mode: MaskMode,
    pub self_loops: bool,
    pub num_classes: usize,
    pub coord_scale: f64,
    pub variant: Variant,
    /// Seed for random graph specs.
    pub graph_seed: u64,
}

impl Default for MgtConfig {
    fn default() -> Self {
        MgtConfig {
            seq_len: 100,
            d_hat: 128,
            layers: 4,
            heads_per_graph: 8,
            dropout: 0.25,
            graph_specs: vec![GraphSpec::KHop(1), GraphSpec::KHop(2), GraphSpec::Global],
            mask_mode: MaskMode::PreSoftmax,
            self_loops: true,
            num_classes: 345,
            coord_scale: 256.0,
            variant: Variant::Mgt,
            graph_seed: 0,
        }
    }
}

impl MgtConfig {
    pub fn base() -> Self {
        Self::default()
    }

    pub fn large() -> Self {
        MgtConfig {
            d_hat: 256,
            ..Self::default()
        }
    }

    /// Node feature width `3 d_hat`.
    pub fn d(&self) -> usize {
        3 * self.d_hat
    }

    pub fn num_graphs(&self) -> usize {
        self.graph_specs.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads_per_graph
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: key.into(),
                msg,
            })
        };
        if self.seq_len == 0 {
            return bad("seq_len", "must be >= 1".into());
        }
        if self.d_hat == 0 {
            return bad("d_hat", "must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layers", "must be >= 1".into());
        }
        if self.heads_per_graph == 0 || !self.d().is_multiple_of(self.heads_per_graph) {
            return bad("heads_per_graph", format!("must divide d = {} ", self.d()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if self.variant == Variant::Mgt && self.graph_specs.is_empty() {
            return bad("graphs", "at least one graph is required".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be >= 1".into());
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return bad("coord_scale", "must be positive".into());
        }
        Ok(())
    }
}

/// Parameter group used in the per-block count breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Embedding,
    Attention,
    GraphMix,
    FeedForward,
    BatchNorm,
    Classifier,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::Embedding,
        Block::Attention,
        Block::GraphMix,
        Block::FeedForward,
        Block::BatchNorm,
        Block::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Embedding => "embedding (E1 weight, E2 table)",
            Block::Attention => "attention (Q/K/V/O per graph)",
            Block::GraphMix => "graph mixing (weight + bias)",
            Block::FeedForward => "feed-forward (weight + bias)",
            Block::BatchNorm => "batch norm (gamma, beta)",
            Block::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform(usize),
    Normal,
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub block: Block,
    init: Init,
}

impl Slot {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct AttnLayer {
    /// `[q, k, v, o]` per graph.
    graphs: Vec<[usize; 4]>,
    mix_w: usize,
    mix_b: usize,
    ff_w: usize,
    ff_b: usize,
    bn1: Norm,
    bn2: Norm,
}

#[derive(Clone, Debug, PartialEq)]
struct FfLayer {
    w: usize,
    b: usize,
    bn: Norm,
}

/// Ordered parameter slots for a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    slots: Vec<Slot>,
    bn_names: Vec<String>,
    e1: usize,
    e2: usize,
    attn: Vec<AttnLayer>,
    ff: Vec<FfLayer>,
    classifier: [(usize, usize); 3],
}

impl Layout {
    pub fn new(config: &MgtConfig) -> Layout {
        let (d, dh) = (config.d(), config.d_hat);
        let mut l = Layout {
            slots: Vec::new(),
            bn_names: Vec::new(),
            e1: 0,
            e2: 0,
            attn: Vec::new(),
            ff: Vec::new(),
            classifier: [(0, 0); 3],
        };
        l.e1 = l.push(
            "embed.coord.weight",
            &[2, dh],
            Block::Embedding,
            Init::Uniform(2),
        );
        l.e2 = l.push(
            "embed.table",
            &[config.seq_len + 3, dh],
            Block::Embedding,
            Init::Normal,
        );
        for layer in 0..config.layers {
            let p = format!("layer{layer}");
            match config.variant {
                Variant::Mgt => {
                    let graphs = (0..config.num_graphs())
                        .map(|g| {
                            ["q", "k", "v", "o"].map(|w| {
                                let name = format!("{p}.graph{g}.{w}");
                                l.push(&name, &[d, d], Block::Attention, Init::Uniform(d))
                            })
                        })
                        .collect();
                    let gd = config.num_graphs() * d;
                    let a = AttnLayer {
                        graphs,
                        mix_w: l.push(
                            &format!("{p}.mix.weight"),
                            &[gd, d],
                            Block::GraphMix,
                            Init::Uniform(gd),
                        ),
                        mix_b: l.push(
                            &format!("{p}.mix.bias"),
                            &[d],
                            Block::GraphMix,
                            Init::Uniform(gd),
                        ),
                        bn1: l.norm(&format!("{p}.bn1"), d),
                        ff_w: l.push(
                            &format!("{p}.ff.weight"),
                            &[d, d],
                            Block::FeedForward,
                            Init::Uniform(d),
                        ),
                        ff_b: l.push(
                            &format!("{p}.ff.bias"),
                            &[d],
                            Block::FeedForward,
                            Init::Uniform(d),
                        ),
                        bn2: l.norm(&format!("{p}.bn2"), d),
                    };
                    l.attn.push(a);
                }
                Variant::FfOnly => {
                    let f = FfLayer {
                        w: l.push(
                            &format!("{p}.ff.weight"),
                            &[d, d],
                            Block::FeedForward,
                            Init::Uniform(d),
                        ),
                        b: l.push(
                            &format!("{p}.ff.bias"),
                            &[d],
                            Block::FeedForward,
                            Init::Uniform(d),
                        ),
                        bn: l.norm(&format!("{p}.bn"), d),
                    };
                    l.ff.push(f);
                }
            }
        }
        let widths = [d, 4 * dh, 4 * dh, config.num_classes];
        for i in 0..3 {
            let (fi, fo) = (widths[i], widths[i + 1]);
            l.classifier[i] = (
                l.push(
                    &format!("classifier{i}.weight"),
                    &[fi, fo],
                    Block::Classifier,
                    Init::Uniform(fi),
                ),
                l.push(
                    &format!("classifier{i}.bias"),
                    &[fo],
                    Block::Classifier,
                    Init::Uniform(fi),
                ),
            );
        }
        l
    }

    fn push(&mut self, name: &str, shape: &[usize], block: Block, init: Init) -> usize {
        self.slots.push(Slot {
            name: name.to_string(),
            shape: shape.to_vec(),
            block,
            init,
        });
        self.slots.len() - 1
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self.push(&format!("{name}.gamma"), &[d], Block::BatchNorm, Init::Ones);
        let beta = self.push(&format!("{name}.beta"), &[d], Block::BatchNorm, Init::Zeros);
        self.bn_names.push(name.to_string());
        Norm {
            gamma,
            beta,
            state: self.bn_names.len() - 1,
        }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Names of the batch-norm sites, in running-state order.
    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn total(&self) -> usize {
        self.slots.iter().map(Slot::size).sum()
    }
}

/// Trainable parameter count with its per-block breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterCount {
    pub total: usize,
    pub blocks: Vec<(Block, usize)>,
}

impl fmt::Display for ParameterCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (block, n) in &self.blocks {
            writeln!(f, "{:<34} {:>12}", block.name(), group_digits(*n))?;
        }
        write!(f, "{:<34} {:>12}", "total", group_digits(self.total))
    }
}

/// `10096601 -> "10,096,601"`.
pub fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Exact count of trainable scalars (batch-norm running statistics excluded).
pub fn count_parameters(config: &MgtConfig) -> ParameterCount {
    let layout = Layout::new(config);
    let blocks = Block::ALL
        .iter()
        .map(|&b| {
            (
                b,
                layout
                    .slots
                    .iter()
                    .filter(|s| s.block == b)
                    .map(Slot::size)
                    .sum(),
            )
        })
        .filter(|&(_, n)| n > 0)
        .collect();
    ParameterCount {
        total: layout.total(),
        blocks,
    }
}

/// Model inputs for a mini-batch, with one stacked mask per graph.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    /// `[B, S, 2]`, already divided by the coordinate scale.
    coords: Vec<f64>,
    flag_rows: Vec<usize>,
    pos_rows: Vec<usize>,
    pub valid: Vec<bool>,
    pub labels: Vec<usize>,
    masks: Vec<Rc<Mask>>,
}

/// Builds the configured graphs for one sample.
pub fn sample_graphs(config: &MgtConfig, sample: &SketchTensor) -> Result<Vec<AdjacencyMatrix>> {
    config
        .graph_specs
        .iter()
        .map(|g| g.build(sample, config.self_loops, config.graph_seed))
        .collect()
}

impl Batch {
    /// Builds graphs on the fly; see [`Batch::with_graphs`] to reuse them.
    pub fn new(config: &MgtConfig, samples: &[&SketchTensor]) -> Result<Batch> {
        let graphs = samples
            .iter()
            .map(|s| sample_graphs(config, s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[AdjacencyMatrix]> = graphs.iter().map(Vec::as_slice).collect();
        Batch::with_graphs(config, samples, &refs)
    }

    /// `graphs[b][g]` is graph `g` of sample `b`. Graphs are ignored by the
    /// feed-forward variant.
    pub fn with_graphs(
        config: &MgtConfig,
        samples: &[&SketchTensor],
        graphs: &[&[AdjacencyMatrix]],
    ) -> Result<Batch> {
        let s = config.seq_len;
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut b = Batch {
            size: samples.len(),
            seq_len: s,
            coords: Vec::with_capacity(samples.len() * s * 2),
            flag_rows: Vec::with_capacity(samples.len() * s),
            pos_rows: Vec::with_capacity(samples.len() * s),
            valid: Vec::with_capacity(samples.len() * s),
            labels: Vec::with_capacity(samples.len()),
            masks: Vec::new(),
        };
        for t in samples {
            if t.seq_len() != s {
                return Err(Error::Config {
                    key: "seq_len".into(),
                    msg: format!("model expects S = {s}, sample has S = {}", t.seq_len()),
                });
            }
            if t.label >= config.num_classes {
                return Err(Error::invalid(format!(
                    "label {} out of range for {} classes",
                    t.label, config.num_classes
                )));
            }
            for i in 0..s {
                b.coords
                    .push(f64::from(t.coords[i][0]) / config.coord_scale);
                b.coords
                    .push(f64::from(t.coords[i][1]) / config.coord_scale);
                b.flag_rows.push(s + usize::from(t.flags[i].code()));
                b.pos_rows.push(i);
                b.valid.push(i < t.true_len);
            }
            b.labels.push(t.label);
        }
        if config.variant == Variant::Mgt {
            if graphs.len() != samples.len() {
                return Err(Error::invalid("one graph set per sample is required"));
            }
            for g in 0..config.num_graphs() {
                let per_sample = graphs
                    .iter()
                    .map(|gs| {
                        gs.get(g)
                            .cloned()
                            .ok_or_else(|| Error::invalid(format!("sample is missing graph {g}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mask = stack_masks(&per_sample)?;
                if mask.size() != s {
                    return Err(Error::invalid("graph size differs from S"));
                }
                b.masks.push(Rc::new(mask));
            }
        }
        Ok(b)
    }
}

/// Tape handles for intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationSet {
    pub embedded: Var,
    /// `h-hat` per layer (empty for the feed-forward variant).
    pub hats: Vec<Var>,
    /// Node features after each layer, `[B, S, d]`.
    pub layers: Vec<Var>,
    /// Effective attention weights `[B, H, S, S]`, indexed `[layer][graph]`.
    pub attention: Vec<Vec<Var>>,
    pub readout: Var,
    pub logits: Var,
}

/// A configured model with its parameters and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: MgtConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
    bn: Vec<BatchNormState<T>>,
}

impl<T: Real> Model<T> {
    /// Randomly initialized model.
    pub fn new(config: MgtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = rng_for(seed, 0x1417);
        let params = layout
            .slots
            .iter()
            .map(|slot| match slot.init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&slot.shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
                Init::Normal => {
                    Tensor::from_fn(&slot.shape, |_| T::lit(StandardNormal.sample(&mut rng)))
                }
                Init::Ones => Tensor::full(&slot.shape, T::one()),
                Init::Zeros => Tensor::zeros(&slot.shape),
            })
            .collect();
        let bn = layout
            .bn_names
            .iter()
            .map(|_| BatchNormState::new(config.d()))
            .collect();
        Ok(Model {
            config,
            layout,
            params,
            bn,
        })
    }

    /// Model from existing tensors, checked against the layout.
    pub fn from_parts(
        config: MgtConfig,
        params: Vec<Tensor<T>>,
        bn: Vec<BatchNormState<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.slots.len() {
            return Err(Error::Checkpoint(format!(
                "config needs {} parameter tensors, got {}",
                layout.slots.len(),
                params.len()
            )));
        }
        for (slot, p) in layout.slots.iter().zip(&params) {
            if p.shape() != slot.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, config needs {:?}",
                    slot.name,
                    p.shape(),
                    slot.shape
                )));
            }
        }
        let d = config.d();
        if bn.len() != layout.bn_names.len()
            || bn.iter().any(|s| s.mean.len() != d || s.var.len() != d)
        {
            return Err(Error::Checkpoint(
                "batch-norm statistics do not match config".into(),
            ));
        }
        Ok(Model {
            config,
            layout,
            params,
            bn,
        })
    }

    pub fn config(&self) -> &MgtConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    /// Looks a parameter up by name.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout
            .slots
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.layout.slots.iter().position(|s| s.name == name)?;
        Some(&mut self.params[i])
    }

    /// Records every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Full forward pass; in train mode the running statistics are updated.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &Batch,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ActivationSet> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.forward_with(tape, vars, &mut bn, batch, mode, rng);
        self.bn = bn;
        out
    }

    /// Eval-mode logits as a plain tensor `[B, classes]`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut bn = self.bn.clone();
        let mut rng = rng_for(0, 0);
        let act = self.forward_with(&mut tape, &vars, &mut bn, batch, Mode::Eval, &mut rng)?;
        Ok(tape.value(act.logits).clone())
    }

    /// Forward pass with explicit parameter handles and batch-norm states.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        bn: &mut [BatchNormState<T>],
        batch: &Batch,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ActivationSet> {
        let cfg = &self.config;
        let l = &self.layout;
        if vars.len() != l.slots.len() || bn.len() != l.bn_names.len() {
            return Err(Error::invalid(
                "parameter handles do not match the model layout",
            ));
        }
        if batch.seq_len != cfg.seq_len {
            return Err(Error::Config {
                key: "seq_len".into(),
                msg: format!(
                    "model expects S = {}, batch has S = {}",
                    cfg.seq_len, batch.seq_len
                ),
            });
        }
        let (b, s, d) = (batch.size, cfg.seq_len, cfg.d());
        let p = cfg.dropout;

        let coords = tape.constant(Tensor::from_f64(&[b, s, 2], &batch.coords)?);
        let coord_emb = tape.matmul(coords, vars[l.e1])?;
        let flag_emb = tape.embedding_lookup(vars[l.e2], &batch.flag_rows, &[b, s])?;
        let pos_emb = tape.embedding_lookup(vars[l.e2], &batch.pos_rows, &[b, s])?;
        let embedded = tape.concat_lastdim(&[coord_emb, flag_emb, pos_emb])?;

        let mut h = embedded;
        let mut hats = Vec::new();
        let mut layers = Vec::new();
        let mut attention = Vec::new();
        let stats = Some(batch.valid.as_slice());
        match cfg.variant {
            Variant::Mgt => {
                for layer in &l.attn {
                    let mut gheads = Vec::with_capacity(layer.graphs.len());
                    let mut maps = Vec::with_capacity(layer.graphs.len());
                    for (g, w) in layer.graphs.iter().enumerate() {
                        let x = tape.dropout(h, p, mode, rng)?;
                        let (out, att) = self.multi_head(
                            tape,
                            x,
                            [vars[w[0]], vars[w[1]], vars[w[2]], vars[w[3]]],
                            &batch.masks[g],
                            b,
                        )?;
                        gheads.push(out);
                        maps.push(att);
                    }
                    let cat = tape.concat_lastdim(&gheads)?;
                    let mixed = tape.matmul(cat, vars[layer.mix_w])?;
                    let mixed = tape.add(mixed, vars[layer.mix_b])?;
                    let mixed = tape.relu(mixed)?;
                    let res = tape.add(h, mixed)?;
                    let n1 = layer.bn1;
                    let hat = tape.batch_norm(
                        res,
                        vars[n1.gamma],
                        vars[n1.beta],
                        &mut bn[n1.state],
                        mode,
                        stats,
                    )?;
                    let ff = self.feed_forward(
                        tape,
                        hat,
                        vars[layer.ff_w],
                        vars[layer.ff_b],
                        mode,
                        rng,
                    )?;
                    let res = tape.add(hat, ff)?;
                    let n2 = layer.bn2;
                    h = tape.batch_norm(
                        res,
                        vars[n2.gamma],
                        vars[n2.beta],
                        &mut bn[n2.state],
                        mode,
                        stats,
                    )?;
                    hats.push(hat);
                    layers.push(h);
                    attention.push(maps);
                }
            }
            Variant::FfOnly => {
                for layer in &l.ff {
                    let ff = self.feed_forward(tape, h, vars[layer.w], vars[layer.b], mode, rng)?;
                    let res = tape.add(h, ff)?;
                    let n = layer.bn;
                    h = tape.batch_norm(
                        res,
                        vars[n.gamma],
                        vars[n.beta],
                        &mut bn[n.state],
                        mode,
                        stats,
                    )?;
                    layers.push(h);
                }
            }
        }
        debug_assert_eq!(tape.shape(h), &[b, s, d]);

        let readout = tape.sum_rows_masked(h, &batch.valid)?;
        let mut z = readout;
        for (i, &(w, bias)) in l.classifier.iter().enumerate() {
            z = tape.matmul(z, vars[w])?;
            z = tape.add(z, vars[bias])?;
            if i < 2 {
                z = tape.relu(z)?;
                z = tape.dropout(z, p, mode, rng)?;
            }
        }
        Ok(ActivationSet {
            embedded,
            hats,
            layers,
            attention,
            readout,
            logits: z,
        })
    }

    /// `dropout(relu(x W + b))`.
    fn feed_forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        w: Var,
        b: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let y = tape.add(y, b)?;
        let y = tape.relu(y)?;
        tape.dropout(y, self.config.dropout, mode, rng)
    }

    /// Multi-head graph attention for one graph; returns the projected output
    /// and the attention weights `[B, H, S, S]`.
    fn multi_head(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        w: [Var; 4],
        mask: &Rc<Mask>,
        b: usize,
    ) -> Result<(Var, Var)> {
        let (s, d, heads, dh) = (
            self.config.seq_len,
            self.config.d(),
            self.config.heads_per_graph,
            self.config.head_dim(),
        );
        let split = |tape: &mut Tape<T>, weight: Var| -> Result<Var> {
            let y = tape.matmul(x, weight)?;
            let y = tape.reshape(y, &[b, s, heads, dh])?;
            tape.swap_axes12(y)
        };
        let q = split(tape, w[0])?;
        let k = split(tape, w[1])?;
        let v = split(tape, w[2])?;
        let (out, att) = graph_attention(tape, q, k, v, mask, self.config.mask_mode)?;
        let out = tape.swap_axes12(out)?;
        let out = tape.reshape(out, &[b, s, d])?;
        Ok((tape.matmul(out, w[3])?, att))
    }

    /// Effective attention maps for one sample in eval mode.
    pub fn attention_maps(&self, sample: &SketchTensor) -> Result<AttentionMaps> {
        if self.config.variant != Variant::Mgt {
            return Err(Error::invalid("the feed-forward variant has no attention"));
        }
        let batch = Batch::new(&self.config, &[sample])?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut bn = self.bn.clone();
        let mut rng = rng_for(0, 0);
        let act = self.forward_with(&mut tape, &vars, &mut bn, &batch, Mode::Eval, &mut rng)?;
        let s = self.config.seq_len;
        let mut maps = Vec::new();
        for (layer, per_graph) in act.attention.iter().enumerate() {
            for (graph, &att) in per_graph.iter().enumerate() {
                let values = tape.value(att).to_f64_vec();
                for (head, chunk) in values.chunks(s * s).enumerate() {
                    maps.push(HeadMap {
                        layer,
                        graph,
                        head,
                        size: s,
                        values: chunk.to_vec(),
                    });
                }
            }
        }
        let logits = tape.value(act.logits).to_f64_vec();
        Ok(AttentionMaps {
            maps,
            predicted: argmax(&logits),
        })
    }
}

/// Graph-masked scaled dot-product attention over `[.., S, d_k]` inputs.
/// Returns the output and the effective attention weights.
///
/// Pre-softmax masking excludes non-edges from the normalization; post-softmax
/// masking zeroes them afterwards so rows may sum to less than one.
pub fn graph_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Rc<Mask>,
    mode: MaskMode,
) -> Result<(Var, Var)> {
    let dk = *tape.shape(q).last().expect("non-empty shape");
    let scores = tape.matmul_bt(q, k)?;
    let scores = tape.scale(scores, T::lit(1.0 / (dk as f64).sqrt()))?;
    let weights = match mode {
        MaskMode::PreSoftmax => {
            let masked = tape.masked_fill_neg_inf(scores, mask)?;
            tape.softmax_lastdim(masked)?
        }
        MaskMode::PostSoftmax => {
            let weights = tape.softmax_lastdim(scores)?;
            tape.hadamard_mask(weights, mask)?
        }
    };
    Ok((tape.matmul(weights, v)?, weights))
}

/// Index of the largest value, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMap {
    pub layer: usize,
    pub graph: usize,
    pub head: usize,
    pub size: usize,
    /// Row-major `S x S`.
    pub values: Vec<f64>,
}

impl HeadMap {
    pub fn file_name(&self) -> String {
        format!(
            "layer{}_graph{}_head{}.csv",
            self.layer, self.graph, self.head
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.size) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub maps: Vec<HeadMap>,
    pub predicted: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    coords: Vec<[f32; 2]>,
    flags: Vec<u8>,
    true_len: usize,
    predicted: usize,
    label: usize,
    predicted_name: Option<String>,
    label_name: Option<String>,
    files: Vec<String>,
}

impl AttentionMaps {
    /// Writes one CSV per head plus `manifest.json` into `dir`.
    pub fn write(
        &self,
        dir: &Path,
        sample: &SketchTensor,
        class_names: Option<&[String]>,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for m in &self.maps {
            std::fs::write(dir.join(m.file_name()), m.to_csv())?;
        }
        let name = |i: usize| class_names.and_then(|n| n.get(i).cloned());
        let manifest = Manifest {
            coords: sample.coords.clone(),
            flags: sample.flags.iter().map(|f| f.code()).collect(),
            true_len: sample.true_len,
            predicted: self.predicted,
            label: sample.label,
            predicted_name: name(self.predicted),
            label_name: name(sample.label),
            files: self.maps.iter().map(HeadMap::file_name).collect(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch_data::{synthesize_sketch, to_sketch_tensor};

    #[test]
    fn parameter_counts_match_reference_table() {
        assert_eq!(count_parameters(&MgtConfig::base()).total, 10_096_601);
        assert_eq!(count_parameters(&MgtConfig::large()).total, 39_984_729);
        let two = MgtConfig {
            graph_specs: vec![GraphSpec::KHop(1), GraphSpec::KHop(2)],
            ..MgtConfig::large()
        };
        assert_eq!(count_parameters(&two).total, 28_188_249);
        let ff = MgtConfig {
            variant: Variant::FfOnly,
            ..MgtConfig::large()
        };
        assert_eq!(count_parameters(&ff).total, 4_586_073);
    }

    #[test]
    fn parameter_count_is_linear_in_classes() {
        let base = MgtConfig::base();
        let more = MgtConfig {
            num_classes: 400,
            ..MgtConfig::base()
        };
        let delta = count_parameters(&more).total - count_parameters(&base).total;
        assert_eq!(delta, 4 * 128 * 55 + 55);
        let same = MgtConfig {
            graph_specs: vec![GraphSpec::KHop(1); 3],
            ..MgtConfig::large()
        };
        assert_eq!(
            count_parameters(&same).total,
            count_parameters(&MgtConfig::large()).total
        );
    }

    #[test]
    fn breakdown_sums_to_total() {
        let c = count_parameters(&MgtConfig::base());
        assert_eq!(c.blocks.iter().map(|b| b.1).sum::<usize>(), c.total);
        assert!(c.to_string().contains("10,096,601"));
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(1000), "1,000");
    }

    #[test]
    fn config_validation() {
        assert!(MgtConfig::base().validate().is_ok());
        let bad = MgtConfig {
            heads_per_graph: 7,
            ..MgtConfig::base()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "heads_per_graph")
        );
        let bad = MgtConfig {
            dropout: 1.0,
            ..MgtConfig::base()
        };
        assert!(bad.validate().is_err());
        let bad = MgtConfig {
            graph_specs: vec![],
            ..MgtConfig::base()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny() -> MgtConfig {
        MgtConfig {
            seq_len: 12,
            d_hat: 4,
            layers: 2,
            heads_per_graph: 2,
            num_classes: 5,
            dropout: 0.1,
            ..MgtConfig::default()
        }
    }

    fn samples(cfg: &MgtConfig, n: usize) -> Vec<SketchTensor> {
        let mut rng = rng_for(5, 5);
        (0..n)
            .map(|i| {
                let d = synthesize_sketch(&mut rng, 1 + i % 3, 2..=5).unwrap();
                to_sketch_tensor(&d, cfg.seq_len, i % cfg.num_classes).unwrap()
            })
            .collect()
    }

    #[test]
    fn embedding_layout_and_shapes() {
        let cfg = tiny();
        let mut model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let data = samples(&cfg, 3);
        let batch = Batch::new(&cfg, &data.iter().collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let act = model
            .forward(&mut tape, &vars, &batch, Mode::Eval, &mut rng_for(0, 0))
            .unwrap();
        assert_eq!(tape.shape(act.embedded), &[3, 12, 12]);
        assert_eq!(tape.shape(act.logits), &[3, 5]);
        assert_eq!(tape.shape(act.readout), &[3, 12]);
        assert_eq!(act.attention.len(), 2);
        assert_eq!(tape.shape(act.attention[1][2]), &[3, 2, 12, 12]);

        let emb = tape.value(act.embedded);
        let table = model.param("embed.table").unwrap();
        // position 5 of sample 0 reads table row 5; its flag reads row S + code
        let row = &emb.data()[5 * 12..6 * 12];
        assert_eq!(&row[8..12], &table.data()[5 * 4..6 * 4]);
        let code = usize::from(data[0].flags[5].code());
        assert_eq!(&row[4..8], &table.data()[(12 + code) * 4..(13 + code) * 4]);
        let e1 = model.param("embed.coord.weight").unwrap();
        let (x, y) = (
            f64::from(data[0].coords[5][0]) / 256.0,
            f64::from(data[0].coords[5][1]) / 256.0,
        );
        for c in 0..4 {
            let want = x * e1.data()[c] + y * e1.data()[4 + c];
            assert!((row[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny();
        let model = Model::<f32>::new(cfg.clone(), 3).unwrap();
        let data = samples(&cfg, 4);
        let batch = Batch::new(&cfg, &data.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(
            model.predict(&batch).unwrap(),
            model.predict(&batch).unwrap()
        );
    }

    #[test]
    fn zero_weights_pass_features_through_residuals() {
        let cfg = MgtConfig {
            dropout: 0.0,
            ..tiny()
        };
        let mut model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let names: Vec<String> = model
            .layout()
            .slots()
            .iter()
            .map(|s| s.name.clone())
            .collect();
        for name in names
            .iter()
            .filter(|n| n.starts_with("layer") && !n.contains(".bn"))
        {
            model.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let data = samples(&cfg, 2);
        let batch = Batch::new(&cfg, &data.iter().collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let act = model
            .forward(&mut tape, &vars, &batch, Mode::Eval, &mut rng_for(0, 0))
            .unwrap();
        let scale = (1.0f64 + 1e-5).sqrt();
        let before = tape.value(act.embedded).data();
        let after = tape.value(act.layers[0]).data();
        for (a, b) in before.iter().zip(after) {
            assert!((a / scale / scale - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_logits() {
        let cfg = tiny();
        let mut model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        for i in 0..3 {
            model
                .param_mut(&format!("classifier{i}.weight"))
                .unwrap()
                .data_mut()
                .fill(0.0);
            model
                .param_mut(&format!("classifier{i}.bias"))
                .unwrap()
                .data_mut()
                .fill(0.0);
        }
        let data = samples(&cfg, 2);
        let batch = Batch::new(&cfg, &data.iter().collect::<Vec<_>>()).unwrap();
        assert!(model
            .predict(&batch)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn two_node_graph_attention_example() {
        for (mode, want) in [
            (MaskMode::PostSoftmax, [0.5, 1.0]),
            (MaskMode::PreSoftmax, [1.0, 2.0]),
        ] {
            let mut tape = Tape::<f64>::new();
            let q = tape.constant(Tensor::zeros(&[1, 2, 1]));
            let v = tape.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, 2.0]).unwrap());
            let mask = Rc::new(Mask::identity(1, 2));
            let (out, _) = graph_attention(&mut tape, q, q, v, &mask, mode).unwrap();
            assert_eq!(tape.value(out).data(), &want, "{mode}");
        }
    }

    #[test]
    fn ff_only_ignores_graphs() {
        let cfg = MgtConfig {
            variant: Variant::FfOnly,
            ..tiny()
        };
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let data = samples(&cfg, 3);
        let refs: Vec<&SketchTensor> = data.iter().collect();
        let a = model.predict(&Batch::new(&cfg, &refs).unwrap()).unwrap();
        let other = MgtConfig {
            graph_specs: vec![GraphSpec::Full],
            ..cfg.clone()
        };
        let b = model.predict(&Batch::new(&other, &refs).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(model.attention_maps(&data[0]).is_err());
    }

    #[test]
    fn mode_and_variant_parse() {
        assert_eq!(
            "pre_softmax".parse::<MaskMode>().unwrap(),
            MaskMode::PreSoftmax
        );
        assert_eq!(
            "post_softmax".parse::<MaskMode>().unwrap(),
            MaskMode::PostSoftmax
        );
        assert!("softmax".parse::<MaskMode>().is_err());
        assert_eq!("ff_only".parse::<Variant>().unwrap(), Variant::FfOnly);
        assert_eq!(MaskMode::PostSoftmax.to_string(), "post_softmax");
    }

    #[test]
    fn attention_maps_are_masked_and_normalized() {
        let cfg = tiny();
        let model = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let data = samples(&cfg, 1);
        let maps = model.attention_maps(&data[0]).unwrap();
        assert_eq!(maps.maps.len(), 2 * 3 * 2);
        let graphs = sample_graphs(&cfg, &data[0]).unwrap();
        for m in &maps.maps {
            let a = &graphs[m.graph];
            for i in 0..cfg.seq_len {
                let row = &m.values[i * cfg.seq_len..(i + 1) * cfg.seq_len];
                for (j, &w) in row.iter().enumerate() {
                    assert!((0.0..=1.0).contains(&w));
                    if !a.get(i, j) {
                        assert_eq!(w, 0.0);
                    }
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        maps.write(dir.path(), &data[0], None).unwrap();
        assert!(dir.path().join("layer1_graph2_head1.csv").exists());
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["true_len"], data[0].true_len);
    }
}
