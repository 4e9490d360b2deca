//! The comparison systems: text-only encoder, fusion at the classifier head
//! (concatenation or a sigmoid gate on the pooled vector), and mid-stack gating.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::encoder::{Batch, ClassifierHead, Encoder, EncoderConfig, HeadConfig, HeadMode};
use crate::error::{Error, Result};
use crate::isfl::{FusionConfig, IsflParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Text only; aux features are ignored.
    None,
    /// Pooled vector concatenated with aux at the head.
    #[serde(rename = "concat", alias = "concat_head")]
    ConcatHead,
    /// Pooled vector multiplied by a sigmoid gate generated from aux.
    LateGate,
    /// Hidden states gated mid-stack.
    Isfl,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::ConcatHead,
        FusionMode::LateGate,
        FusionMode::Isfl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::ConcatHead => "concat",
            FusionMode::LateGate => "late_gate",
            FusionMode::Isfl => "isfl",
        }
    }

    fn head_mode(self) -> HeadMode {
        match self {
            FusionMode::None | FusionMode::Isfl => HeadMode::ClsOnly,
            FusionMode::ConcatHead => HeadMode::Concat,
            FusionMode::LateGate => HeadMode::LateGate,
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "concat" | "concat_head" => Ok(FusionMode::ConcatHead),
            "late_gate" => Ok(FusionMode::LateGate),
            "isfl" => Ok(FusionMode::Isfl),
            other => Err(Error::invalid(
                "model.fusion_mode",
                format!("unknown mode {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the auxiliary feature vector.
    pub d_struct: usize,
    pub fusion_mode: FusionMode,
    /// Present exactly when `fusion_mode` is `isfl`.
    #[serde(default)]
    pub fusion: Option<FusionConfig>,
    #[serde(default)]
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, d_struct: usize, fusion_mode: FusionMode) -> Self {
        let fusion =
            (fusion_mode == FusionMode::Isfl).then(|| FusionConfig::midpoint(encoder.n_layers));
        ModelConfig {
            encoder,
            d_struct,
            fusion_mode,
            fusion,
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_struct == 0 && self.fusion_mode != FusionMode::None {
            return Err(Error::invalid(
                "model.d_struct",
                "fusion needs at least one aux feature",
            ));
        }
        match (&self.fusion, self.fusion_mode) {
            (Some(f), FusionMode::Isfl) => f.validate(self.encoder.n_layers)?,
            (None, FusionMode::Isfl) => {
                return Err(Error::invalid(
                    "model.fusion",
                    "required when fusion_mode is isfl",
                ))
            }
            (Some(_), mode) => {
                return Err(Error::invalid(
                    "model.fusion",
                    format!("not allowed when fusion_mode is {mode}"),
                ))
            }
            (None, _) => {}
        }
        if self.head.hidden == Some(0) {
            return Err(Error::invalid("model.head.hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Per-example output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

impl Prediction {
    /// Probability of class 1.
    pub fn p1(&self) -> f64 {
        self.probs[1]
    }
}

/// A model instance: configuration, parameters and the handles into them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub head: ClassifierHead,
    pub isfl: Option<IsflParams>,
}

impl Model {
    /// Fresh model with weights drawn from `normal(0, 0.02)` seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.encoder.d_model;
        let encoder = Encoder::register(&config.encoder, &mut params, &mut rng)?;
        let isfl = match (&config.fusion, config.fusion_mode) {
            (Some(f), FusionMode::Isfl) => Some(IsflParams::register(
                &mut params,
                &mut rng,
                f,
                config.d_struct,
                d,
            )?),
            _ => None,
        };
        let head = ClassifierHead::register(
            &mut params,
            &mut rng,
            config.fusion_mode.head_mode(),
            &config.head,
            d,
            config.d_struct,
        )?;
        Ok(Model {
            config,
            params,
            encoder,
            head,
            isfl,
        })
    }

    /// Rebuilds a model around loaded parameters, checking that every
    /// parameter the config implies is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Model::new(config.clone(), 0)?;
        for expected in template.params.iter() {
            match params.by_name(&expected.name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "missing parameter {}",
                        expected.name
                    )))
                }
                Some(p) if p.value.shape() != expected.value.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?} but the config implies {:?}",
                        expected.name,
                        p.value.shape(),
                        expected.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params
            .iter()
            .find(|p| template.params.by_name(&p.name).is_none())
        {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter {}",
                extra.name
            )));
        }
        let d = config.encoder.d_model;
        let encoder = Encoder::lookup(&config.encoder, &params)?;
        let isfl = match (&config.fusion, config.fusion_mode) {
            (Some(f), FusionMode::Isfl) => {
                Some(IsflParams::lookup(&params, f, config.d_struct, d)?)
            }
            _ => None,
        };
        let head = ClassifierHead::lookup(
            &params,
            config.fusion_mode.head_mode(),
            &config.head,
            d,
            config.d_struct,
        )?;
        Ok(Model {
            config,
            params,
            encoder,
            head,
            isfl,
        })
    }

    fn check_aux(&self, batch: &Batch) -> Result<()> {
        if self.config.fusion_mode != FusionMode::None
            && batch.aux.shape()[1] != self.config.d_struct
        {
            return Err(Error::invalid(
                "d_struct",
                format!(
                    "model expects {} aux features but the batch has {}",
                    self.config.d_struct,
                    batch.aux.shape()[1]
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass against an explicit parameter store and
    /// returns the `[batch, 2]` logits.
    pub fn logits_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_aux(batch)?;
        let aux =
            (self.config.fusion_mode != FusionMode::None).then(|| g.constant(batch.aux.clone()));
        let hook = match (&self.isfl, &self.config.fusion, aux) {
            (Some(isfl), Some(fusion), Some(aux)) => Some(isfl.hook(store, aux, fusion)),
            _ => None,
        };
        let h = self.encoder.encode(g, store, batch, hook.as_ref(), rng)?;
        let head_aux = match self.head.mode {
            HeadMode::ClsOnly => None,
            _ => aux,
        };
        self.head.classify(g, store, h, head_aux)
    }

    pub fn logits(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.logits_with(g, &self.params, batch, None)
    }

    /// Mean two-class cross-entropy of the batch.
    pub fn loss_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let logits = self.logits_with(g, store, batch, rng)?;
        g.cross_entropy(logits, &batch.labels)
    }

    /// Inference without dropout.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, batch)?;
        Ok(g.value(logits)
            .data()
            .chunks(2)
            .map(|z| {
                let m = z[0].max(z[1]);
                let e = [(z[0] - m).exp(), (z[1] - m).exp()];
                let s = e[0] + e[1];
                Prediction {
                    logits: [z[0], z[1]],
                    probs: [e[0] / s, e[1] / s],
                }
            })
            .collect())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: FusionMode) -> ModelConfig {
        ModelConfig::new(
            EncoderConfig {
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                max_len: 6,
                vocab_size: 10,
                dropout_rate: 0.0,
            },
            3,
            mode,
        )
    }

    #[test]
    fn fusion_presence_is_validated() {
        let mut c = cfg(FusionMode::None);
        c.fusion = Some(FusionConfig::midpoint(2));
        assert!(c.validate().is_err());
        let mut c = cfg(FusionMode::Isfl);
        c.fusion = None;
        assert!(c.validate().is_err());
        assert!(cfg(FusionMode::Isfl).validate().is_ok());
    }

    #[test]
    fn parameter_names_per_mode() {
        let names = |m| {
            Model::new(cfg(m), 0)
                .unwrap()
                .params
                .iter()
                .map(|p| p.name.clone())
                .collect::<Vec<_>>()
        };
        assert!(names(FusionMode::Isfl).contains(&"isfl.W_gate".to_string()));
        assert!(!names(FusionMode::None)
            .iter()
            .any(|n| n.starts_with("isfl.")));
        assert!(names(FusionMode::LateGate).contains(&"late.W".to_string()));
        let concat = Model::new(cfg(FusionMode::ConcatHead), 0).unwrap();
        assert_eq!(
            concat.params.by_name("head.W").unwrap().value.shape(),
            &[2, 11]
        );
    }

    #[test]
    fn from_params_detects_shape_mismatch() {
        let model = Model::new(cfg(FusionMode::Isfl), 1).unwrap();
        let mut other = cfg(FusionMode::Isfl);
        other.d_struct = 4;
        let err = Model::from_params(other, model.params.clone()).unwrap_err();
        assert!(err.to_string().contains("isfl.W_gate"), "{err}");
        assert!(Model::from_params(cfg(FusionMode::Isfl), model.params).is_ok());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(m.name().parse::<FusionMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<FusionMode>(&json).unwrap(), m);
        }
        assert_eq!(
            serde_json::from_str::<FusionMode>("\"concat_head\"").unwrap(),
            FusionMode::ConcatHead
        );
    }
}
