//! Intermediate fusion by contextual gating.
//!
//! A per-example auxiliary feature vector `f` is mapped to a gate
//! `g = sigmoid(W f + b)` with one entry per hidden channel. The gate is
//! broadcast over the sequence axis and multiplied into the hidden states
//! produced after a chosen number of encoder blocks:
//!
//! ```text
//! H'[b, t, c] = H[b, t, c] * g[b, c]      for every position t
//! ```
//!
//! The blocks after the insertion point then re-contextualize the modulated
//! states. In `two_layer` mode the affine map is replaced by
//! `W₂ tanh(W₁ f + b₁) + b₂`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::encoder::{FusionHook, Linear};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    #[serde(alias = "single")]
    SingleAffine,
    TwoLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of completed encoder blocks before the gate is applied.
    pub insert_layer_index: usize,
    #[serde(default)]
    pub gate_mode: GateMode,
    /// Hidden width in `two_layer` mode; defaults to `d_model`.
    #[serde(default)]
    pub gate_hidden: Option<usize>,
}

impl FusionConfig {
    /// Gate after the middle block of an `n_layers` stack.
    pub fn midpoint(n_layers: usize) -> Self {
        FusionConfig {
            insert_layer_index: n_layers / 2,
            gate_mode: GateMode::SingleAffine,
            gate_hidden: None,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.insert_layer_index > n_layers {
            return Err(Error::invalid(
                "fusion.insert_layer_index",
                format!("{} is outside [0, {n_layers}]", self.insert_layer_index),
            ));
        }
        if self.gate_hidden == Some(0) {
            return Err(Error::invalid("fusion.gate_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Gate generator parameters: `isfl.W_gate` `[d_model, d_in]`, `isfl.b_gate`
/// `[d_model]`, plus `isfl.hidden.*` in two-layer mode.
#[derive(Clone, Debug)]
pub struct IsflParams {
    pub mode: GateMode,
    pub hidden: Option<Linear>,
    pub gate: Linear,
    pub d_struct: usize,
    pub d_model: usize,
}

impl IsflParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &FusionConfig,
        d_struct: usize,
        d_model: usize,
    ) -> Result<Self> {
        let (hidden, gate_in) = match config.gate_mode {
            GateMode::SingleAffine => (None, d_struct),
            GateMode::TwoLayer => {
                let width = config.gate_hidden.unwrap_or(d_model);
                (
                    Some(Linear::register(
                        store,
                        rng,
                        "isfl.hidden",
                        d_struct,
                        width,
                    )?),
                    width,
                )
            }
        };
        let gate = Linear {
            weight: store.insert(
                "isfl.W_gate",
                crate::encoder::normal_tensor(rng, &[d_model, gate_in], 0.02),
            )?,
            bias: store.insert("isfl.b_gate", crate::tensor::Tensor::zeros(&[d_model]))?,
        };
        Ok(IsflParams {
            mode: config.gate_mode,
            hidden,
            gate,
            d_struct,
            d_model,
        })
    }

    pub fn lookup(
        store: &ParamStore,
        config: &FusionConfig,
        d_struct: usize,
        d_model: usize,
    ) -> Result<Self> {
        let find = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(IsflParams {
            mode: config.gate_mode,
            hidden: match config.gate_mode {
                GateMode::SingleAffine => None,
                GateMode::TwoLayer => Some(Linear::lookup(store, "isfl.hidden")?),
            },
            gate: Linear {
                weight: find("isfl.W_gate")?,
                bias: find("isfl.b_gate")?,
            },
            d_struct,
            d_model,
        })
    }

    /// Gate vectors `[batch, d_model]`, every entry in (0, 1). In f64 an
    /// entry rounds to exactly 1 once its pre-activation passes about 37.
    pub fn compute_gate(&self, g: &mut Graph, store: &ParamStore, aux: Var) -> Result<Var> {
        let shape = g.shape(aux);
        if shape.len() != 2 || shape[1] != self.d_struct {
            return Err(Error::ShapeMismatch {
                op: "compute_gate",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(0), self.d_struct],
            });
        }
        let x = match &self.hidden {
            Some(hidden) => {
                let z = hidden.forward(g, store, aux)?;
                g.tanh(z)?
            }
            None => aux,
        };
        let z = self.gate.forward(g, store, x)?;
        g.sigmoid(z)
    }

    /// A hook that gates the hidden states after `config.insert_layer_index` blocks.
    pub fn hook<'a>(
        &'a self,
        store: &'a ParamStore,
        aux: Var,
        config: &FusionConfig,
    ) -> FusionHook<'a> {
        FusionHook {
            index: config.insert_layer_index,
            transform: Box::new(move |g: &mut Graph, h: Var| {
                let gate = self.compute_gate(g, store, aux)?;
                modulate(g, h, gate)
            }),
        }
    }
}

/// `H'[b, t, c] = H[b, t, c] * gate[b, c]`: the per-example gate broadcast over positions.
pub fn modulate(g: &mut Graph, h: Var, gate: Var) -> Result<Var> {
    let hs = g.shape(h).to_vec();
    let gs = g.shape(gate).to_vec();
    if hs.len() != 3 || gs.len() != 2 || hs[0] != gs[0] || hs[2] != gs[1] {
        return Err(Error::ShapeMismatch {
            op: "modulate",
            left: hs,
            right: gs,
        });
    }
    let gate = g.reshape(gate, &[gs[0], 1, gs[1]])?;
    g.mul(h, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn single(d_struct: usize, d_model: usize) -> (ParamStore, IsflParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = IsflParams::register(
            &mut store,
            &mut rng,
            &FusionConfig::midpoint(2),
            d_struct,
            d_model,
        )
        .unwrap();
        (store, params)
    }

    fn set(store: &mut ParamStore, name: &str, values: &[f64]) {
        let p = store.by_name_mut(name).unwrap();
        p.value = Tensor::new(p.value.shape().to_vec(), values.to_vec()).unwrap();
    }

    #[test]
    fn zero_params_give_half_gate() {
        let (mut store, params) = single(3, 5);
        set(&mut store, "isfl.W_gate", &[0.0; 15]);
        let mut g = Graph::new();
        let aux = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let gate = params.compute_gate(&mut g, &store, aux).unwrap();
        assert_eq!(g.value(gate).data(), &[0.5; 5]);
    }

    #[test]
    fn scalar_gate_is_sigmoid_one() {
        let (mut store, params) = single(1, 1);
        set(&mut store, "isfl.W_gate", &[1.0]);
        let mut g = Graph::new();
        let aux = g.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let gate = params.compute_gate(&mut g, &store, aux).unwrap();
        assert!((g.value(gate).data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn saturated_bias_is_near_identity() {
        let (mut store, params) = single(2, 4);
        set(&mut store, "isfl.W_gate", &[0.0; 8]);
        set(&mut store, "isfl.b_gate", &[20.0; 4]);
        let mut g = Graph::new();
        let aux = g.constant(Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap());
        let gate = params.compute_gate(&mut g, &store, aux).unwrap();
        assert!(g
            .value(gate)
            .data()
            .iter()
            .all(|&v| (1.0 - 1e-8..1.0).contains(&v)));
    }

    #[test]
    fn gate_rejects_wrong_width() {
        let (store, params) = single(3, 4);
        let mut g = Graph::new();
        let aux = g.constant(Tensor::zeros(&[2, 2]));
        assert!(params.compute_gate(&mut g, &store, aux).is_err());
    }

    #[test]
    fn modulate_hand_example() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(vec![1, 3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let gate = g.constant(Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap());
        let out = modulate(&mut g, h, gate).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, 2., 1.5, 4., 2.5, 6.]);

        let ones = g.constant(Tensor::ones(&[1, 2]));
        let same = modulate(&mut g, h, ones).unwrap();
        assert_eq!(g.value(same).data(), g.value(h).data());
        let zeros = g.constant(Tensor::zeros(&[1, 2]));
        let gone = modulate(&mut g, h, zeros).unwrap();
        assert!(g.value(gone).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulate_shape_errors() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 3, 4]));
        let wrong_batch = g.constant(Tensor::zeros(&[1, 4]));
        let wrong_width = g.constant(Tensor::zeros(&[2, 3]));
        assert!(modulate(&mut g, h, wrong_batch).is_err());
        assert!(modulate(&mut g, h, wrong_width).is_err());
    }

    #[test]
    fn two_layer_registers_hidden_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FusionConfig {
            insert_layer_index: 1,
            gate_mode: GateMode::TwoLayer,
            gate_hidden: None,
        };
        let params = IsflParams::register(&mut store, &mut rng, &cfg, 4, 8).unwrap();
        assert_eq!(
            store.by_name("isfl.hidden.W").unwrap().value.shape(),
            &[8, 4]
        );
        assert_eq!(store.by_name("isfl.W_gate").unwrap().value.shape(), &[8, 8]);
        let mut g = Graph::new();
        let aux = g.constant(Tensor::ones(&[3, 4]));
        let gate = params.compute_gate(&mut g, &store, aux).unwrap();
        assert_eq!(g.shape(gate), &[3, 8]);
    }

    #[test]
    fn config_bounds() {
        assert!(FusionConfig::midpoint(12).validate(12).is_ok());
        assert_eq!(FusionConfig::midpoint(12).insert_layer_index, 6);
        let mut cfg = FusionConfig::midpoint(2);
        cfg.insert_layer_index = 3;
        assert!(cfg.validate(2).is_err());
    }
}
