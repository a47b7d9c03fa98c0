use sketch_mgt::gradcheck::{model_suite, tiny_model_config, TOLERANCE};
use sketch_mgt::graph::GraphSpec;
use sketch_mgt::model::{Batch, MaskMode, MgtConfig, Model};
use sketch_mgt::sketch_data::SketchTensor;
use sketch_mgt::tensor::{rng_for, Mode, Tape, Tensor};

mod common;
use common::{
    post_softmax_coupling, post_softmax_weights_error, pre_softmax_locality, sketch, small,
};

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let reports = model_suite(&tiny_model_config(), 2, 11).unwrap();
    assert!(reports.len() > 20);
    for (name, r) in &reports {
        assert!(r.passes(TOLERANCE), "{name}: {r:?}");
    }
}

#[test]
fn pre_softmax_layer_one_is_local() {
    let checked = pre_softmax_locality(50).unwrap();
    assert!(checked >= 40, "{checked}");
}

#[test]
fn post_softmax_couples_through_the_denominator() {
    post_softmax_coupling().unwrap();
}

#[test]
fn post_softmax_weights_equal_masked_softmax() {
    let err = post_softmax_weights_error();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn extra_padding_does_not_change_eval_logits() {
    let short_cfg = MgtConfig {
        dropout: 0.0,
        ..small(MaskMode::PreSoftmax)
    };
    let long_cfg = MgtConfig {
        seq_len: 24,
        ..short_cfg.clone()
    };
    let long = Model::<f64>::new(long_cfg.clone(), 5).unwrap();
    let (s, sl, dh) = (short_cfg.seq_len, long_cfg.seq_len, short_cfg.d_hat);
    let mut params = long.params().to_vec();
    let table_idx = long
        .layout()
        .slots()
        .iter()
        .position(|x| x.name == "embed.table")
        .unwrap();
    let table = long.params()[table_idx].data();
    let mut short_table = table[..s * dh].to_vec();
    short_table.extend_from_slice(&table[sl * dh..]);
    params[table_idx] = Tensor::new(vec![s + 3, dh], short_table).unwrap();
    let mut short =
        Model::from_parts(short_cfg.clone(), params, long.bn_states().to_vec()).unwrap();
    // Non-trivial running statistics.
    for st in short.bn_states_mut() {
        for (i, m) in st.mean.iter_mut().enumerate() {
            *m = 0.01 * i as f64;
        }
    }
    let mut long = Model::from_parts(
        long_cfg.clone(),
        long.params().to_vec(),
        short.bn_states().to_vec(),
    )
    .unwrap();

    let samples: Vec<SketchTensor> = (0..4).map(|i| sketch(20 + i, s, i as usize % 3)).collect();
    let padded: Vec<SketchTensor> = samples
        .iter()
        .map(|t| {
            let mut p = t.clone();
            p.coords.resize(sl, [-1.0, -1.0]);
            p.flags.resize(sl, sketch_mgt::sketch_data::Flag::Padding);
            p.stroke_ids.resize(sl, -1);
            p
        })
        .collect();
    let a = short
        .predict(&Batch::new(&short_cfg, &samples.iter().collect::<Vec<_>>()).unwrap())
        .unwrap();
    let b = long
        .predict(&Batch::new(&long_cfg, &padded.iter().collect::<Vec<_>>()).unwrap())
        .unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }

    // Train-mode batch statistics ignore padding as well.
    let mut tape = Tape::new();
    let vars = short.bind(&mut tape, false);
    let batch = Batch::new(&short_cfg, &samples.iter().collect::<Vec<_>>()).unwrap();
    short
        .forward(&mut tape, &vars, &batch, Mode::Train, &mut rng_for(1, 1))
        .unwrap();
    let mut tape = Tape::new();
    let vars = long.bind(&mut tape, false);
    let batch = Batch::new(&long_cfg, &padded.iter().collect::<Vec<_>>()).unwrap();
    long.forward(&mut tape, &vars, &batch, Mode::Train, &mut rng_for(1, 1))
        .unwrap();
    for (x, y) in short.bn_states().iter().zip(long.bn_states()) {
        for (a, b) in x.mean.iter().zip(&y.mean) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn mgmha_rectifies_and_layers_preserve_shape() {
    let cfg = MgtConfig {
        graph_specs: vec![GraphSpec::KHop(1), GraphSpec::KHop(2), GraphSpec::Global],
        ..small(MaskMode::PreSoftmax)
    };
    let mut model = Model::<f64>::new(cfg.clone(), 8).unwrap();
    let samples: Vec<SketchTensor> = (0..3).map(|i| sketch(i, cfg.seq_len, 0)).collect();
    let batch = Batch::new(&cfg, &samples.iter().collect::<Vec<_>>()).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let act = model
        .forward(&mut tape, &vars, &batch, Mode::Train, &mut rng_for(2, 2))
        .unwrap();
    for &h in act.layers.iter().chain(&act.hats) {
        assert_eq!(tape.shape(h), &[3, cfg.seq_len, cfg.d()]);
    }
    assert_eq!(tape.shape(act.logits), &[3, cfg.num_classes]);

    // A strongly negative mixing bias switches the attention branch off, so the
    // first sub-layer reduces to batch norm of the residual alone.
    let mut model = Model::<f64>::new(cfg.clone(), 8).unwrap();
    for l in 0..cfg.layers {
        model
            .param_mut(&format!("layer{l}.mix.bias"))
            .unwrap()
            .data_mut()
            .fill(-1e6);
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let act = model
        .forward(&mut tape, &vars, &batch, Mode::Eval, &mut rng_for(2, 2))
        .unwrap();
    let scale = (1.0f64 + 1e-5).sqrt();
    for (x, y) in tape
        .value(act.embedded)
        .data()
        .iter()
        .zip(tape.value(act.hats[0]).data())
    {
        assert!((x / scale - y).abs() < 1e-12);
    }
}
