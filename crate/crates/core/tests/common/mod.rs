#![allow(dead_code)]

pub mod oracles;

use isfl::data::{Encoded, CLS, PAD, SEP};
use isfl::encoder::{Batch, EncoderConfig};
use isfl::{FusionMode, Graph, Model, ModelConfig, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const TOY_VOCAB: usize = 12;

/// 2 layers, d_model 16, 2 heads, sequence length 8.
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 8,
        vocab_size: TOY_VOCAB,
        dropout_rate: 0.0,
    }
}

/// Redraws every parameter from `normal(0, std)` so gradients are far from zero.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let normal = Normal::new(0.0, std).unwrap();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = normal.sample(rng);
        }
    }
}

pub fn toy_model(mode: FusionMode, d_struct: usize, seed: u64, rng: &mut ChaCha8Rng) -> Model {
    let mut model = Model::new(ModelConfig::new(toy_encoder(), d_struct, mode), seed).unwrap();
    randomize(&mut model.params, rng, 0.3);
    model
}

/// One example: `[CLS]`, `len - 1` random content ids, then padding.
pub fn random_example(
    rng: &mut ChaCha8Rng,
    seq_len: usize,
    vocab: usize,
    d_struct: usize,
) -> Encoded {
    let len = rng.random_range(1..=seq_len);
    let mut ids = vec![PAD; seq_len];
    ids[0] = CLS;
    for id in ids.iter_mut().take(len).skip(1) {
        *id = rng.random_range(SEP + 1..vocab);
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    Encoded {
        ids,
        mask: (0..seq_len).map(|t| t < len).collect(),
        aux: (0..d_struct).map(|_| normal.sample(rng)).collect(),
        label: rng.random_range(0..2),
    }
}

pub fn random_examples(
    rng: &mut ChaCha8Rng,
    n: usize,
    seq_len: usize,
    vocab: usize,
    d_struct: usize,
) -> Vec<Encoded> {
    (0..n)
        .map(|_| random_example(rng, seq_len, vocab, d_struct))
        .collect()
}

pub fn random_batch(
    rng: &mut ChaCha8Rng,
    size: usize,
    seq_len: usize,
    vocab: usize,
    d_struct: usize,
) -> Batch {
    Batch::from_examples(&random_examples(rng, size, seq_len, vocab, d_struct)).unwrap()
}

/// Reduces an output to a scalar with fixed random weights, so no
/// gradient vanishes by symmetry (as it would for a plain sum of a softmax).
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}
