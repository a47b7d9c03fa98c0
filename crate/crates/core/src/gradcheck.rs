//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it is used to audit.

use std::rc::Rc;

use rand::Rng as _;

use crate::error::Result;
use crate::model::{Batch, MgtConfig, Model};
use crate::sketch_data::{synthesize_sketch, to_sketch_tensor};
use crate::tensor::{rng_for, BatchNormState, Mask, Mode, Tape, Tensor, Var};

/// Finite-difference step used by the suites below.
pub const STEP: f64 = 1e-5;
/// Relative-error threshold used by the suites below.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of comparing tape gradients with finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|g - g_num| / max(1, |g|, |g_num|)` seen.
    pub max_rel_err: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error metric used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares gradients of the scalar built by `f` against central differences
/// with step `h`. At most `max_per_input` entries of each input are probed
/// (evenly strided), all of them when `None`.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_per_input: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which], input.shape());
        let n = input.len();
        let stride = max_per_input.map_or(1, |m| n.div_ceil(m.max(1)));
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            probe[which].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((which, e));
                }
            }
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, 0xface);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(out * w)` for fixed random `w`, so every output entry matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(uniform(tape.shape(out), seed ^ 0x5eed));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn random_mask(batch: usize, size: usize, seed: u64) -> Mask {
    let mut rng = rng_for(seed, 0x3a5c);
    let data = (0..batch * size * size)
        .map(|i| (i % (size * size)).is_multiple_of(size + 1) || rng.random_bool(0.5))
        .collect();
    Mask::new(batch, size, data).expect("consistent mask")
}

/// Gradient checks of every differentiable op on three shapes each.
pub fn op_suite() -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = check_gradients(&inputs, STEP, None, |t, v| {
            let y = f(t, v)?;
            project(t, y, inputs.len() as u64)
        })?;
        out.push((name.to_string(), report));
        Ok(())
    };
    for (i, &(m, k, n)) in [(1, 1, 1), (2, 3, 4), (5, 2, 3)].iter().enumerate() {
        let seed = i as u64;
        run(
            &format!("matmul [{m},{k}]x[{k},{n}]"),
            vec![uniform(&[m, k], seed), uniform(&[k, n], seed + 10)],
            &|t, v| t.matmul(v[0], v[1]),
        )?;
        run(
            &format!("matmul batched [3,{m},{k}]x[3,{k},{n}]"),
            vec![uniform(&[3, m, k], seed), uniform(&[3, k, n], seed + 10)],
            &|t, v| t.matmul(v[0], v[1]),
        )?;
        run(
            &format!("matmul broadcast [2,{m},{k}]x[{k},{n}]"),
            vec![uniform(&[2, m, k], seed), uniform(&[k, n], seed + 10)],
            &|t, v| t.matmul(v[0], v[1]),
        )?;
        run(
            &format!("matmul_bt [2,{m},{k}]x[2,{n},{k}]"),
            vec![uniform(&[2, m, k], seed), uniform(&[2, n, k], seed + 10)],
            &|t, v| t.matmul_bt(v[0], v[1]),
        )?;
    }
    for (i, shape) in [vec![3], vec![2, 4], vec![2, 3, 5]].into_iter().enumerate() {
        let seed = 100 + i as u64;
        let last = *shape.last().unwrap();
        let a = uniform(&shape, seed);
        let b = uniform(&shape, seed + 1);
        run(
            &format!("add {shape:?}"),
            vec![a.clone(), b.clone()],
            &|t, v| t.add(v[0], v[1]),
        )?;
        run(
            &format!("add bias {shape:?}"),
            vec![a.clone(), uniform(&[last], seed + 2)],
            &|t, v| t.add(v[0], v[1]),
        )?;
        run(
            &format!("mul {shape:?}"),
            vec![a.clone(), b.clone()],
            &|t, v| t.mul(v[0], v[1]),
        )?;
        run(&format!("scale {shape:?}"), vec![a.clone()], &|t, v| {
            t.scale(v[0], -1.7)
        })?;
        run(&format!("relu {shape:?}"), vec![a.clone()], &|t, v| {
            t.relu(v[0])
        })?;
        run(&format!("sum {shape:?}"), vec![a.clone()], &|t, v| {
            t.sum(v[0])
        })?;
        run(&format!("softmax {shape:?}"), vec![a.clone()], &|t, v| {
            t.softmax_lastdim(v[0])
        })?;
        run(
            &format!("concat {shape:?}"),
            vec![a.clone(), b.clone(), a.clone()],
            &|t, v| t.concat_lastdim(&[v[0], v[1], v[2]]),
        )?;
        let flat = [a.len()];
        run(&format!("reshape {shape:?}"), vec![a.clone()], &|t, v| {
            t.reshape(v[0], &flat)
        })?;
    }
    for (i, &(b, h, s, d)) in [(1, 1, 2, 1), (2, 3, 4, 2), (1, 2, 5, 3)]
        .iter()
        .enumerate()
    {
        let seed = 200 + i as u64;
        run(
            &format!("swap_axes12 [{b},{h},{s},{d}]"),
            vec![uniform(&[b, h, s, d], seed)],
            &|t, v| t.swap_axes12(v[0]),
        )?;
        let mask = Rc::new(random_mask(b, s, seed));
        let m = mask.clone();
        run(
            &format!("masked_fill+softmax [{b},{h},{s},{s}]"),
            vec![uniform(&[b, h, s, s], seed)],
            &move |t, v| {
                let y = t.masked_fill_neg_inf(v[0], &m)?;
                t.softmax_lastdim(y)
            },
        )?;
        let m = mask.clone();
        run(
            &format!("softmax+hadamard_mask [{b},{h},{s},{s}]"),
            vec![uniform(&[b, h, s, s], seed)],
            &move |t, v| {
                let y = t.softmax_lastdim(v[0])?;
                t.hadamard_mask(y, &m)
            },
        )?;
    }
    for (i, &(rows, w, n)) in [(1, 1, 2), (5, 3, 4), (7, 2, 9)].iter().enumerate() {
        let seed = 300 + i as u64;
        let idx: Vec<usize> = (0..n).map(|j| (j * 5 + 1) % rows).collect();
        run(
            &format!("embedding [{rows},{w}] x {n}"),
            vec![uniform(&[rows, w], seed)],
            &move |t, v| t.embedding_lookup(v[0], &idx, &[n]),
        )?;
    }
    for (i, &(b, s, d)) in [(1, 1, 2), (2, 4, 3), (3, 5, 1)].iter().enumerate() {
        let seed = 400 + i as u64;
        let valid: Vec<bool> = (0..b * s).map(|j| j % s == 0 || j % 3 != 1).collect();
        run(
            &format!("sum_rows_masked [{b},{s},{d}]"),
            vec![uniform(&[b, s, d], seed)],
            &move |t, v| t.sum_rows_masked(v[0], &valid),
        )?;
    }
    for (i, shape) in [vec![4], vec![3, 5], vec![2, 2, 6]].into_iter().enumerate() {
        let seed = 500 + i as u64;
        run(
            &format!("dropout {shape:?}"),
            vec![uniform(&shape, seed)],
            &move |t, v| t.dropout(v[0], 0.3, Mode::Train, &mut rng_for(seed, 1)),
        )?;
    }
    for (i, &(n, d)) in [(2, 1), (8, 4), (3, 2)].iter().enumerate() {
        let seed = 600 + i as u64;
        let inputs = vec![
            uniform(&[n, d], seed),
            uniform(&[d], seed + 1),
            uniform(&[d], seed + 2),
        ];
        run(
            &format!("batch_norm [{n},{d}]"),
            inputs.clone(),
            &move |t, v| {
                let mut st = BatchNormState::new(d);
                t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train, None)
            },
        )?;
        let rows: Vec<bool> = (0..n + 1).map(|j| j != 1).collect();
        let mut ext = inputs.clone();
        ext[0] = uniform(&[n + 1, d], seed + 3);
        run(
            &format!("batch_norm masked [{},{d}]", n + 1),
            ext,
            &move |t, v| {
                let mut st = BatchNormState::new(d);
                t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train, Some(&rows))
            },
        )?;
    }
    for (i, &(n, c)) in [(1, 2), (4, 3), (6, 7)].iter().enumerate() {
        let seed = 700 + i as u64;
        let labels: Vec<usize> = (0..n).map(|j| (j * 2 + 1) % c).collect();
        let report = check_gradients(&[uniform(&[n, c], seed)], STEP, None, |t, v| {
            t.cross_entropy_logits(v[0], &labels)
        })?;
        out.push((format!("cross_entropy [{n},{c}]"), report));
    }
    Ok(out)
}

/// Configuration of the end-to-end check: tiny, two layers, two graphs.
pub fn tiny_model_config() -> MgtConfig {
    MgtConfig {
        seq_len: 8,
        d_hat: 6,
        layers: 2,
        heads_per_graph: 2,
        dropout: 0.1,
        graph_specs: vec![
            crate::graph::GraphSpec::KHop(1),
            crate::graph::GraphSpec::Global,
        ],
        num_classes: 4,
        ..MgtConfig::default()
    }
}

/// End-to-end check of the cross-entropy loss of a train-mode forward pass,
/// one report per named parameter tensor.
pub fn model_suite(
    config: &MgtConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let model = Model::<f64>::new(config.clone(), seed)?;
    let mut rng = rng_for(seed, 0xbeef);
    let samples = (0..batch_size)
        .map(|i| {
            let d = synthesize_sketch(&mut rng, 1 + i % 3, 1..=config.seq_len / 2 + 1)?;
            to_sketch_tensor(&d, config.seq_len, i % config.num_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::new(config, &samples.iter().collect::<Vec<_>>())?;
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut bn = model.bn_states().to_vec();
        let act = model.forward_with(
            tape,
            vars,
            &mut bn,
            &batch,
            Mode::Train,
            &mut rng_for(seed, 0xd0),
        )?;
        tape.cross_entropy_logits(act.logits, &batch.labels)
    };
    let inputs = model.params().to_vec();
    let names = model.layout().slots().iter().map(|s| s.name.clone());
    let mut out = Vec::new();
    for (i, name) in names.enumerate() {
        // Perturb one tensor at a time; the others are held fixed.
        let report = check_gradients(&inputs[i..=i], STEP, None, |tape, v| {
            let mut vars = Vec::with_capacity(inputs.len());
            for (j, t) in inputs.iter().enumerate() {
                vars.push(if j == i {
                    v[0]
                } else {
                    tape.constant(t.clone())
                });
            }
            f(tape, &vars)
        })?;
        out.push((name, report));
    }
    Ok(out)
}
