//! Post-norm Transformer encoder: learned token and position embeddings,
//! multi-head self-attention, GELU feed-forward blocks, CLS pooling and the
//! classification head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Added to attention scores of padded keys. Large enough that `exp` underflows to exactly 0.
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            max_len: 16,
            vocab_size: 64,
            dropout_rate: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.n_layers", self.n_layers),
            ("encoder.d_model", self.d_model),
            ("encoder.n_heads", self.n_heads),
            ("encoder.d_ff", self.d_ff),
            ("encoder.vocab_size", self.vocab_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.max_len < 2 {
            return Err(Error::invalid("encoder.max_len", "must be at least 2"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "encoder.d_model",
                format!(
                    "{} is not divisible by n_heads = {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("encoder.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

/// A dense `y = x Wᵀ + b` map, weights stored `[out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.insert(
                format!("{prefix}.W"),
                normal_tensor(rng, &[outputs, inputs], INIT_STD),
            )?,
            bias: store.insert(format!("{prefix}.b"), Tensor::zeros(&[outputs]))?,
        })
    }

    /// Binds parameters already present in `store` under `prefix`.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(Linear {
            weight: find("W")?,
            bias: find("b")?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.insert(format!("{prefix}.gain"), Tensor::ones(&[width]))?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]))?,
        })
    }

    fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(LayerNormParams {
            gain: find("gain")?,
            bias: find("bias")?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Parameters of one encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln_attn: LayerNormParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln_ff: LayerNormParams,
}

impl EncoderBlockParams {
    fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        i: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let p = format!("layers.{i}");
        let d = cfg.d_model;
        Ok(EncoderBlockParams {
            query: Linear::register(store, rng, &format!("{p}.attn.q"), d, d)?,
            key: Linear::register(store, rng, &format!("{p}.attn.k"), d, d)?,
            value: Linear::register(store, rng, &format!("{p}.attn.v"), d, d)?,
            output: Linear::register(store, rng, &format!("{p}.attn.o"), d, d)?,
            ln_attn: LayerNormParams::register(store, &format!("{p}.ln1"), d)?,
            ff_in: Linear::register(store, rng, &format!("{p}.ff.in"), d, cfg.d_ff)?,
            ff_out: Linear::register(store, rng, &format!("{p}.ff.out"), cfg.d_ff, d)?,
            ln_ff: LayerNormParams::register(store, &format!("{p}.ln2"), d)?,
        })
    }

    fn lookup(store: &ParamStore, i: usize) -> Result<Self> {
        let p = format!("layers.{i}");
        Ok(EncoderBlockParams {
            query: Linear::lookup(store, &format!("{p}.attn.q"))?,
            key: Linear::lookup(store, &format!("{p}.attn.k"))?,
            value: Linear::lookup(store, &format!("{p}.attn.v"))?,
            output: Linear::lookup(store, &format!("{p}.attn.o"))?,
            ln_attn: LayerNormParams::lookup(store, &format!("{p}.ln1"))?,
            ff_in: Linear::lookup(store, &format!("{p}.ff.in"))?,
            ff_out: Linear::lookup(store, &format!("{p}.ff.out"))?,
            ln_ff: LayerNormParams::lookup(store, &format!("{p}.ln2"))?,
        })
    }
}

/// A batch of encoded examples laid out for the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    /// Row-major `[size, seq_len]` token ids.
    pub ids: Vec<usize>,
    /// Row-major `[size, seq_len]` attention mask.
    pub mask: Vec<bool>,
    /// `[size, d_struct]` standardized auxiliary features.
    pub aux: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Encoded>) -> Result<Self> {
        let examples: Vec<&Encoded> = examples.into_iter().collect();
        let first = examples.first().ok_or(Error::Empty("batch"))?;
        let (seq_len, d_struct) = (first.ids.len(), first.aux.len());
        let mut ids = Vec::with_capacity(examples.len() * seq_len);
        let mut mask = Vec::with_capacity(examples.len() * seq_len);
        let mut aux = Vec::with_capacity(examples.len() * d_struct);
        for ex in &examples {
            if ex.ids.len() != seq_len || ex.mask.len() != seq_len || ex.aux.len() != d_struct {
                return Err(Error::Data(
                    "examples in a batch must share sequence length and aux width".into(),
                ));
            }
            ids.extend_from_slice(&ex.ids);
            mask.extend_from_slice(&ex.mask);
            aux.extend_from_slice(&ex.aux);
        }
        let aux = if d_struct == 0 {
            Tensor::zeros(&[examples.len(), 1])
        } else {
            Tensor::new(vec![examples.len(), d_struct], aux)?
        };
        Ok(Batch {
            size: examples.len(),
            seq_len,
            ids,
            mask,
            aux,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }

    /// Additive attention bias of shape `[size, 1, 1, seq_len]`.
    pub fn mask_bias(&self) -> Result<Tensor> {
        for (b, row) in self.mask.chunks(self.seq_len).enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::invalid(
                    format!("mask[{b}]"),
                    "every position is masked",
                ));
            }
        }
        let data = self
            .mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::new(vec![self.size, 1, 1, self.seq_len], data)
    }
}

pub type HiddenTransform<'a> = Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>;

/// A transform applied to the hidden states after `index` completed blocks.
pub struct FusionHook<'a> {
    pub index: usize,
    pub transform: HiddenTransform<'a>,
}

/// Parameter handles for the whole encoder stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<EncoderBlockParams>,
}

impl Encoder {
    pub fn register(
        config: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.insert(
            "embed.token",
            normal_tensor(rng, &[config.vocab_size, d], INIT_STD),
        )?;
        let position_embedding = store.insert(
            "embed.position",
            normal_tensor(rng, &[config.max_len, d], INIT_STD),
        )?;
        let blocks = (0..config.n_layers)
            .map(|i| EncoderBlockParams::register(store, rng, i, config))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    pub fn lookup(config: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(Encoder {
            config: config.clone(),
            token_embedding: find("embed.token")?,
            position_embedding: find("embed.position")?,
            blocks: (0..config.n_layers)
                .map(|i| EncoderBlockParams::lookup(store, i))
                .collect::<Result<_>>()?,
        })
    }

    /// Token plus learned position embeddings, `[batch, seq, d_model]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        if batch.seq_len > self.config.max_len {
            return Err(Error::invalid(
                "seq_len",
                format!("{} exceeds max_len {}", batch.seq_len, self.config.max_len),
            ));
        }
        let table = g.param(store, self.token_embedding);
        let tokens = g.embedding(table, &batch.ids, &[batch.size, batch.seq_len])?;
        let pos_table = g.param(store, self.position_embedding);
        let positions: Vec<usize> = (0..batch.seq_len).collect();
        let pos = g.embedding(pos_table, &positions, &[batch.seq_len])?;
        g.add(tokens, pos)
    }

    /// Multi-head scaled dot-product self-attention. `mask_bias` is
    /// `[batch, 1, 1, seq]` as produced by [`Batch::mask_bias`].
    pub fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &EncoderBlockParams,
        h: Var,
        mask_bias: Var,
    ) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let [b, l, d] = shape[..] else {
            return Err(Error::InvalidShape {
                shape,
                reason: "hidden states must be [batch, seq, d_model]".into(),
            });
        };
        let heads = self.config.n_heads;
        let dk = d / heads;
        let split = |lin: &Linear, g: &mut Graph| -> Result<Var> {
            let x = lin.forward(g, store, h)?;
            let x = g.reshape(x, &[b, l, heads, dk])?;
            g.permute(x, &[0, 2, 1, 3])
        };
        let q = split(&block.query, g)?;
        let k = split(&block.key, g)?;
        let v = split(&block.value, g)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let scores = g.add(scores, mask_bias)?;
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        block.output.forward(g, store, ctx)
    }

    /// `LN(x + Attn(x))` followed by `LN(a + FF(a))`.
    pub fn block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &EncoderBlockParams,
        h: Var,
        mask_bias: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let attn = self.attention(g, store, block, h, mask_bias)?;
        let attn = self.dropout(g, attn, rng.as_deref_mut())?;
        let a = g.add(h, attn)?;
        let a = block.ln_attn.forward(g, store, a)?;
        let ff = block.ff_in.forward(g, store, a)?;
        let ff = g.gelu(ff)?;
        let ff = block.ff_out.forward(g, store, ff)?;
        let ff = self.dropout(g, ff, rng)?;
        let out = g.add(a, ff)?;
        block.ln_ff.forward(g, store, out)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.config.dropout_rate;
        let Some(rng) = rng.filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 - rate;
        let mut mask = Tensor::zeros(g.shape(x));
        for m in mask.data_mut() {
            *m = if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            };
        }
        let mask = g.constant(mask);
        g.mul(x, mask)
    }

    /// Runs the full stack. When `hook` is given, its transform is applied
    /// after `hook.index` completed blocks (0 = on the embeddings).
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        hook: Option<&FusionHook<'_>>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if let Some(hook) = hook {
            if hook.index > self.config.n_layers {
                return Err(Error::invalid(
                    "fusion.insert_layer_index",
                    format!("{} is outside [0, {}]", hook.index, self.config.n_layers),
                ));
            }
        }
        let bias = batch.mask_bias()?;
        let bias = g.constant(bias);
        let mut h = self.embed(g, store, batch)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(hook) = hook.filter(|k| k.index == i) {
                h = (hook.transform)(g, h)?;
            }
            h = self.block(g, store, block, h, bias, rng.as_deref_mut())?;
        }
        if let Some(hook) = hook.filter(|k| k.index == self.config.n_layers) {
            h = (hook.transform)(g, h)?;
        }
        Ok(h)
    }
}

/// How the classifier head sees the auxiliary features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    ClsOnly,
    Concat,
    LateGate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of an optional tanh hidden layer before the logits.
    pub hidden: Option<usize>,
}

/// Maps a pooled vector (optionally fused with aux) to two logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub mode: HeadMode,
    pub input_width: usize,
    pub hidden: Option<Linear>,
    pub output: Linear,
    /// Gate generator for [`HeadMode::LateGate`], `[d_model, d_struct]`.
    pub late_gate: Option<Linear>,
}

impl ClassifierHead {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        mode: HeadMode,
        config: &HeadConfig,
        d_model: usize,
        d_struct: usize,
    ) -> Result<Self> {
        let input_width = match mode {
            HeadMode::Concat => d_model + d_struct,
            _ => d_model,
        };
        let late_gate = match mode {
            HeadMode::LateGate => Some(Linear::register(store, rng, "late", d_struct, d_model)?),
            _ => None,
        };
        let (hidden, out_in) = match config.hidden {
            Some(0) => return Err(Error::invalid("head.hidden", "must be positive")),
            Some(w) => (
                Some(Linear::register(store, rng, "head.hidden", input_width, w)?),
                w,
            ),
            None => (None, input_width),
        };
        let output = Linear::register(store, rng, "head", out_in, 2)?;
        Ok(ClassifierHead {
            mode,
            input_width,
            hidden,
            output,
            late_gate,
        })
    }

    pub fn lookup(
        store: &ParamStore,
        mode: HeadMode,
        config: &HeadConfig,
        d_model: usize,
        d_struct: usize,
    ) -> Result<Self> {
        let input_width = match mode {
            HeadMode::Concat => d_model + d_struct,
            _ => d_model,
        };
        Ok(ClassifierHead {
            mode,
            input_width,
            hidden: config
                .hidden
                .map(|_| Linear::lookup(store, "head.hidden"))
                .transpose()?,
            output: Linear::lookup(store, "head")?,
            late_gate: (mode == HeadMode::LateGate)
                .then(|| Linear::lookup(store, "late"))
                .transpose()?,
        })
    }

    /// Logits `[batch, 2]` from the CLS position of `h`.
    pub fn classify(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        aux: Option<Var>,
    ) -> Result<Var> {
        let pooled = g.select(h, 1, 0)?;
        let features = match (self.mode, aux) {
            (HeadMode::ClsOnly, None) => pooled,
            (HeadMode::Concat, Some(aux)) => g.concat_last(pooled, aux)?,
            (HeadMode::LateGate, Some(aux)) => {
                let gate_map = self.late_gate.as_ref().expect("late gate registered");
                let z = gate_map.forward(g, store, aux)?;
                let gate = g.sigmoid(z)?;
                g.mul(pooled, gate)?
            }
            (mode, aux) => {
                return Err(Error::invalid(
                    "head.mode",
                    format!(
                        "{mode:?} {} auxiliary features",
                        if aux.is_some() {
                            "does not take"
                        } else {
                            "requires"
                        }
                    ),
                ))
            }
        };
        let features = match &self.hidden {
            Some(hidden) => {
                let z = hidden.forward(g, store, features)?;
                g.tanh(z)?
            }
            None => features,
        };
        self.output.forward(g, store, features)
    }
}
