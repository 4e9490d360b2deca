mod common;

use common::{random_batch, toy_encoder, toy_model, TOY_VOCAB};
use isfl::isfl::{modulate, FusionConfig, GateMode};
use isfl::{FusionMode, Graph, Model, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The same encoder and head weights without any `isfl.*` parameters.
fn strip_gate(model: &Model) -> Model {
    let mut store = ParamStore::new();
    for p in model.params.iter().filter(|p| !p.name.starts_with("isfl.")) {
        store.insert(p.name.clone(), p.value.clone()).unwrap();
    }
    let config = ModelConfig::new(
        model.config.encoder.clone(),
        model.config.d_struct,
        FusionMode::None,
    );
    Model::from_params(config, store).unwrap()
}

fn open_gate(model: &mut Model) {
    for p in model.params.iter_mut() {
        match p.name.as_str() {
            "isfl.W_gate" => p.value.data_mut().fill(0.0),
            "isfl.b_gate" => p.value.data_mut().fill(20.0),
            _ => {}
        }
    }
}

fn logits(model: &Model, batch: &isfl::encoder::Batch) -> Vec<f64> {
    let mut g = Graph::new();
    let z = model.logits(&mut g, batch).unwrap();
    g.value(z).data().to_vec()
}

#[test]
fn saturated_gate_reduces_to_the_plain_encoder() {
    for gate_mode in [GateMode::SingleAffine, GateMode::TwoLayer] {
        for layer in 0..=2 {
            let mut r = ChaCha8Rng::seed_from_u64(layer as u64);
            let mut config = ModelConfig::new(toy_encoder(), 3, FusionMode::Isfl);
            config.fusion = Some(FusionConfig {
                insert_layer_index: layer,
                gate_mode,
                gate_hidden: None,
            });
            let mut model = Model::new(config, 1).unwrap();
            common::randomize(&mut model.params, &mut r, 0.3);
            open_gate(&mut model);
            let plain = strip_gate(&model);
            for _ in 0..20 {
                let batch = random_batch(&mut r, 3, 8, TOY_VOCAB, 3);
                let (a, b) = (logits(&model, &batch), logits(&plain, &batch));
                for (x, y) in a.iter().zip(&b) {
                    assert!(
                        (x - y).abs() < 1e-6,
                        "{gate_mode:?} layer {layer}: {x} vs {y}"
                    );
                }
            }
        }
    }
}

#[test]
fn closed_gate_removes_text_information() {
    // With the gate at zero after the last block, the CLS vector is zero and
    // the logits equal the head bias for every input.
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut config = ModelConfig::new(toy_encoder(), 2, FusionMode::Isfl);
    config.fusion = Some(FusionConfig {
        insert_layer_index: 2,
        ..FusionConfig::midpoint(2)
    });
    let mut model = Model::new(config, 3).unwrap();
    common::randomize(&mut model.params, &mut r, 0.3);
    for p in model.params.iter_mut() {
        match p.name.as_str() {
            "isfl.W_gate" => p.value.data_mut().fill(0.0),
            "isfl.b_gate" => p.value.data_mut().fill(-800.0),
            _ => {}
        }
    }
    let bias = model
        .params
        .by_name("head.b")
        .unwrap()
        .value
        .data()
        .to_vec();
    let batch = random_batch(&mut r, 4, 8, TOY_VOCAB, 2);
    for row in logits(&model, &batch).chunks(2) {
        assert_eq!(row, &bias[..]);
    }
}

#[test]
fn insertion_point_matters() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let base = toy_model(FusionMode::Isfl, 3, 11, &mut r);
    let batch = random_batch(&mut r, 2, 8, TOY_VOCAB, 3);
    let outputs: Vec<Vec<f64>> = (0..=2)
        .map(|layer| {
            let mut config = base.config.clone();
            config.fusion.as_mut().unwrap().insert_layer_index = layer;
            let model = Model::from_params(config, base.params.clone()).unwrap();
            logits(&model, &batch)
        })
        .collect();
    assert_ne!(outputs[0], outputs[1]);
    assert_ne!(outputs[1], outputs[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gate_is_strictly_inside_the_unit_interval_and_constant_over_positions(
        seed in any::<u64>(),
        batch in 1usize..4,
        len in 1usize..8,
        d_struct in 1usize..5,
        two_layer in any::<bool>(),
        scale in 0.01f64..1.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut config = ModelConfig::new(toy_encoder(), d_struct, FusionMode::Isfl);
        if two_layer {
            config.fusion.as_mut().unwrap().gate_mode = GateMode::TwoLayer;
        }
        let mut model = Model::new(config, seed).unwrap();
        common::randomize(&mut model.params, &mut r, scale);
        let isfl = model.isfl.as_ref().unwrap();
        let d = model.config.encoder.d_model;

        let mut g = Graph::new();
        let aux: Vec<f64> = (0..batch * d_struct).map(|_| r.random_range(-3.0..3.0)).collect();
        let aux = g.constant(Tensor::new(vec![batch, d_struct], aux).unwrap());
        let h: Vec<f64> = (0..batch * len * d)
            .map(|_| {
                let v: f64 = r.random_range(-2.0..2.0);
                if v.abs() < 1e-3 { 1.0 } else { v }
            })
            .collect();
        let hv = g.constant(Tensor::new(vec![batch, len, d], h.clone()).unwrap());
        let gate = isfl.compute_gate(&mut g, &model.params, aux).unwrap();
        let out = modulate(&mut g, hv, gate).unwrap();
        let gate = g.value(gate).data().to_vec();
        let out = g.value(out).data().to_vec();

        for &v in &gate {
            prop_assert!(v > 0.0 && v < 1.0, "gate entry {}", v);
        }
        for b in 0..batch {
            for c in 0..d {
                let ratio0 = out[(b * len) * d + c] / h[(b * len) * d + c];
                for t in 0..len {
                    let i = (b * len + t) * d + c;
                    let ratio = out[i] / h[i];
                    prop_assert!((ratio - ratio0).abs() <= 1e-12 * ratio0.abs().max(1e-300));
                    prop_assert!((ratio - gate[b * d + c]).abs() <= 1e-15);
                }
            }
        }
    }
}
