use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tensor};

/// Architecture hyperparameters of the text encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub layernorm_eps: f64,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            model_dim: 32,
            num_heads: 4,
            ff_dim: 128,
            vocab_size: super::vocab::NUM_RESERVED,
            max_tokens: 16,
            layernorm_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_blocks < 2 {
            return fail(format!("num_blocks {} < 2", self.num_blocks));
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return fail("model_dim, num_heads and ff_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size < super::vocab::NUM_RESERVED {
            return fail(format!("vocab_size {} < reserved ids", self.vocab_size));
        }
        if self.max_tokens < 2 {
            return fail(format!("max_tokens {} < 2", self.max_tokens));
        }
        if !(self.layernorm_eps > 0.0) {
            return fail(format!("layernorm_eps {} must be > 0", self.layernorm_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn num_params(&self) -> usize {
        4 + self.num_blocks * BlockParam::ALL.len()
    }

    /// Every parameter slot in canonical order.
    pub fn slots(&self) -> impl Iterator<Item = ParamSlot> + '_ {
        (0..self.num_params()).map(move |i| self.slot(ParamId(i)))
    }

    pub fn param_id(&self, slot: ParamSlot) -> ParamId {
        let per = BlockParam::ALL.len();
        ParamId(match slot {
            ParamSlot::TokenEmbedding => 0,
            ParamSlot::PositionEmbedding => 1,
            ParamSlot::Block(l, p) => 2 + (l - 1) * per + p as usize,
            ParamSlot::FinalLnGain => 2 + self.num_blocks * per,
            ParamSlot::FinalLnBias => 3 + self.num_blocks * per,
        })
    }

    pub fn slot(&self, id: ParamId) -> ParamSlot {
        let per = BlockParam::ALL.len();
        let last = 2 + self.num_blocks * per;
        match id.0 {
            0 => ParamSlot::TokenEmbedding,
            1 => ParamSlot::PositionEmbedding,
            i if i < last => ParamSlot::Block((i - 2) / per + 1, BlockParam::ALL[(i - 2) % per]),
            i if i == last => ParamSlot::FinalLnGain,
            _ => ParamSlot::FinalLnBias,
        }
    }

    pub fn shape(&self, slot: ParamSlot) -> Vec<usize> {
        let (d, ff) = (self.model_dim, self.ff_dim);
        match slot {
            ParamSlot::TokenEmbedding => vec![self.vocab_size, d],
            ParamSlot::PositionEmbedding => vec![self.max_tokens, d],
            ParamSlot::FinalLnGain | ParamSlot::FinalLnBias => vec![d],
            ParamSlot::Block(_, p) => match p {
                BlockParam::WQ | BlockParam::WK | BlockParam::WV | BlockParam::WOut => vec![d, d],
                BlockParam::Fc1W => vec![d, ff],
                BlockParam::Fc1B => vec![ff],
                BlockParam::Fc2W => vec![ff, d],
                _ => vec![d],
            },
        }
    }

    /// Ids of every parameter belonging to the given 1-based blocks.
    pub fn block_param_ids(&self, blocks: impl IntoIterator<Item = usize>) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = blocks
            .into_iter()
            .flat_map(|l| BlockParam::ALL.iter().map(move |&p| ParamSlot::Block(l, p)))
            .map(|s| self.param_id(s))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Standard deviation used for the normal init of a weight slot, or
    /// `None` for layernorm gains (1) and biases (0).
    ///
    /// Embeddings use 0.02. Block matrices follow the CLIP text-transformer
    /// scheme so that frozen downstream projections are not contractive.
    pub fn init_std(&self, slot: ParamSlot) -> Option<f64> {
        let d = self.model_dim as f64;
        let depth = (2.0 * self.num_blocks as f64).sqrt();
        match slot {
            ParamSlot::TokenEmbedding | ParamSlot::PositionEmbedding => Some(0.02),
            ParamSlot::Block(_, p) => match p {
                BlockParam::WQ | BlockParam::WK | BlockParam::WV => Some(d.powf(-0.5)),
                BlockParam::WOut | BlockParam::Fc2W => Some(d.powf(-0.5) / depth),
                BlockParam::Fc1W => Some((2.0 * d).powf(-0.5)),
                _ => None,
            },
            ParamSlot::FinalLnGain | ParamSlot::FinalLnBias => None,
        }
    }
}

/// Per-block parameters in declared order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockParam {
    Ln1Gain,
    Ln1Bias,
    WQ,
    BQ,
    WK,
    BK,
    WV,
    BV,
    WOut,
    BOut,
    Ln2Gain,
    Ln2Bias,
    Fc1W,
    Fc1B,
    Fc2W,
    Fc2B,
}

impl BlockParam {
    pub const ALL: [BlockParam; 16] = [
        BlockParam::Ln1Gain,
        BlockParam::Ln1Bias,
        BlockParam::WQ,
        BlockParam::BQ,
        BlockParam::WK,
        BlockParam::BK,
        BlockParam::WV,
        BlockParam::BV,
        BlockParam::WOut,
        BlockParam::BOut,
        BlockParam::Ln2Gain,
        BlockParam::Ln2Bias,
        BlockParam::Fc1W,
        BlockParam::Fc1B,
        BlockParam::Fc2W,
        BlockParam::Fc2B,
    ];

    fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Gain => "ln1.gain",
            BlockParam::Ln1Bias => "ln1.bias",
            BlockParam::WQ => "attn.w_q",
            BlockParam::BQ => "attn.b_q",
            BlockParam::WK => "attn.w_k",
            BlockParam::BK => "attn.b_k",
            BlockParam::WV => "attn.w_v",
            BlockParam::BV => "attn.b_v",
            BlockParam::WOut => "attn.w_out",
            BlockParam::BOut => "attn.b_out",
            BlockParam::Ln2Gain => "ln2.gain",
            BlockParam::Ln2Bias => "ln2.bias",
            BlockParam::Fc1W => "mlp.fc1.w",
            BlockParam::Fc1B => "mlp.fc1.b",
            BlockParam::Fc2W => "mlp.fc2.w",
            BlockParam::Fc2B => "mlp.fc2.b",
        }
    }
}

/// Location of one parameter tensor in the encoder. Blocks are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    TokenEmbedding,
    PositionEmbedding,
    Block(usize, BlockParam),
    FinalLnGain,
    FinalLnBias,
}

impl ParamSlot {
    pub fn block(self) -> Option<usize> {
        match self {
            ParamSlot::Block(l, _) => Some(l),
            _ => None,
        }
    }

    /// Member of the first-block partition (the only parameters HiRM edits).
    pub fn is_first_block(self) -> bool {
        self.block() == Some(1)
    }
}

impl fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSlot::TokenEmbedding => f.write_str("token_embedding"),
            ParamSlot::PositionEmbedding => f.write_str("position_embedding"),
            ParamSlot::Block(l, p) => write!(f, "block{l}.{}", p.name()),
            ParamSlot::FinalLnGain => f.write_str("final_ln.gain"),
            ParamSlot::FinalLnBias => f.write_str("final_ln.bias"),
        }
    }
}

/// Full parameter set, indexed by [`ParamId`] in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    /// Normal init from a counter-based stream: each parameter draws from its
    /// own ChaCha20 stream selected by its canonical index.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .slots()
            .enumerate()
            .map(|(i, slot)| {
                let shape = config.shape(slot);
                match (config.init_std(slot), slot) {
                    (Some(std), _) => {
                        let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
                        rng.set_stream(i as u64);
                        let n = shape.iter().product();
                        let data = (0..n)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                std * z
                            })
                            .collect();
                        Tensor::new(shape, data).expect("shape from config")
                    }
                    (
                        None,
                        ParamSlot::FinalLnGain
                        | ParamSlot::Block(_, BlockParam::Ln1Gain | BlockParam::Ln2Gain),
                    ) => Tensor::full(&shape, 1.0),
                    (None, _) => Tensor::zeros(&shape),
                }
            })
            .collect();
        Self::from_tensors(config.clone(), tensors)
    }

    /// Wraps tensors in canonical order, checking count and shapes.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != config.num_params() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                config.num_params(),
                tensors.len()
            )));
        }
        for (slot, t) in config.slots().zip(&tensors) {
            let expected = config.shape(slot);
            if t.shape() != expected.as_slice() {
                return Err(Error::Shape {
                    op: "encoder params",
                    lhs: t.shape().to_vec(),
                    rhs: expected,
                });
            }
        }
        let params = Self { config, tensors };
        params.assert_partition();
        Ok(params)
    }

    // Every id is first-block or rest, never both.
    fn assert_partition(&self) {
        let first = self.config.block_param_ids([1]);
        let rest: Vec<ParamId> = (0..self.tensors.len())
            .map(ParamId)
            .filter(|id| !self.config.slot(*id).is_first_block())
            .collect();
        assert_eq!(first.len() + rest.len(), self.tensors.len());
        assert!(first.iter().all(|id| !rest.contains(id)));
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, slot: ParamSlot) -> &Tensor {
        &self.tensors[self.config.param_id(slot).0]
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// `(slot, tensor)` pairs in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamSlot, &Tensor)> {
        self.config.slots().zip(&self.tensors)
    }

    pub fn bit_eq(&self, other: &EncoderParams) -> bool {
        self.config == other.config
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}
