use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{BlockParam, EncoderParams, ParamSlot};
use super::vocab::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{causal_mask, NodeId, Tape, Tensor};

/// Activation recorded inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    /// Output of the attention output projection `W_out` (`T x d`).
    AttnOutProj,
    /// Output of the MLP's second linear map `fc2` (`T x d`).
    MlpFc2,
    /// Residual stream after the block. For the final block this is the
    /// post-final-layernorm representation `h^(L)`.
    BlockOutput,
    /// Post-GELU MLP hidden units (`T x ff_dim`), used as "neurons".
    MlpHidden,
}

impl HookKind {
    pub const SUPERVISION: [HookKind; 3] = [HookKind::AttnOutProj, HookKind::MlpFc2, HookKind::BlockOutput];

    pub fn as_str(self) -> &'static str {
        match self {
            HookKind::AttnOutProj => "attn_out_proj",
            HookKind::MlpFc2 => "mlp_fc2",
            HookKind::BlockOutput => "block_output",
            HookKind::MlpHidden => "mlp_hidden",
        }
    }
}

impl fmt::Display for HookKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HookKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "attn_out_proj" | "w_out" | "attn_out" => Ok(HookKind::AttnOutProj),
            "mlp_fc2" | "fc2" => Ok(HookKind::MlpFc2),
            "block_output" | "out" => Ok(HookKind::BlockOutput),
            "mlp_hidden" | "neurons" => Ok(HookKind::MlpHidden),
            _ => Err(Error::Config(format!("unknown hook kind {s:?}"))),
        }
    }
}

/// A `(block, hook)` activation address; blocks are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SupervisionPoint {
    pub block: usize,
    pub kind: HookKind,
}

impl SupervisionPoint {
    pub fn new(block: usize, kind: HookKind) -> Self {
        Self { block, kind }
    }

    /// `W_out` of the final block.
    pub fn default_for(num_blocks: usize) -> Self {
        Self::new(num_blocks, HookKind::AttnOutProj)
    }

    pub fn check(&self, num_blocks: usize) -> Result<()> {
        if self.block == 0 || self.block > num_blocks {
            return Err(Error::OutOfRange {
                what: "block",
                index: self.block,
                max: num_blocks,
            });
        }
        Ok(())
    }
}

impl fmt::Display for SupervisionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.block, self.kind)
    }
}

impl FromStr for SupervisionPoint {
    type Err = Error;

    /// Parses `"<block>-<hook>"`, e.g. `"4-attn_out_proj"` or `"1-mlp-fc2"`.
    fn from_str(s: &str) -> Result<Self> {
        let (block, kind) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("probe {s:?} is not <block>-<hook>")))?;
        let block = block
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad block in probe {s:?}")))?;
        Ok(Self::new(block, kind.trim().parse()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub attn_out: Tensor,
    pub mlp_hidden: Tensor,
    pub mlp_out: Tensor,
    /// Residual stream after this block, before any final layernorm.
    pub block_out: Tensor,
}

/// Every intermediate activation of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub h0: Tensor,
    pub blocks: Vec<BlockTrace>,
    /// `h^(L)`: final layernorm applied to the last block's output.
    pub final_out: Tensor,
}

impl HiddenTrace {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// The activation at `point`; `(L, block_output)` resolves to `h^(L)`.
    pub fn hook(&self, point: SupervisionPoint) -> Result<&Tensor> {
        point.check(self.blocks.len())?;
        let b = &self.blocks[point.block - 1];
        Ok(match point.kind {
            HookKind::AttnOutProj => &b.attn_out,
            HookKind::MlpFc2 => &b.mlp_out,
            HookKind::MlpHidden => &b.mlp_hidden,
            HookKind::BlockOutput if point.block == self.blocks.len() => &self.final_out,
            HookKind::BlockOutput => &b.block_out,
        })
    }
}

/// Free-function form of [`HiddenTrace::hook`].
pub fn hook(trace: &HiddenTrace, point: SupervisionPoint) -> Result<&Tensor> {
    trace.hook(point)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub attn_out: NodeId,
    pub mlp_hidden: NodeId,
    pub mlp_out: NodeId,
    pub block_out: NodeId,
}

/// Node ids of every hook activation recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub h0: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub final_out: NodeId,
}

impl TapeTrace {
    pub fn hook(&self, point: SupervisionPoint) -> Result<NodeId> {
        point.check(self.blocks.len())?;
        let b = &self.blocks[point.block - 1];
        Ok(match point.kind {
            HookKind::AttnOutProj => b.attn_out,
            HookKind::MlpFc2 => b.mlp_out,
            HookKind::MlpHidden => b.mlp_hidden,
            HookKind::BlockOutput if point.block == self.blocks.len() => self.final_out,
            HookKind::BlockOutput => b.block_out,
        })
    }

    pub fn to_hidden(&self, tape: &Tape) -> HiddenTrace {
        HiddenTrace {
            h0: tape.value(self.h0).clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockTrace {
                    attn_out: tape.value(b.attn_out).clone(),
                    mlp_hidden: tape.value(b.mlp_hidden).clone(),
                    mlp_out: tape.value(b.mlp_out).clone(),
                    block_out: tape.value(b.block_out).clone(),
                })
                .collect(),
            final_out: tape.value(self.final_out).clone(),
        }
    }
}

fn at<T>(r: Result<T>, block: usize, hook: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("block {block} {hook}: {context}"),
        },
        other => other,
    })
}

/// Records the full forward pass on `tape`, registering every parameter with
/// its canonical [`ParamId`](crate::tensor::ParamId).
pub fn record_forward(params: &EncoderParams, seq: &TokenSequence, tape: &mut Tape) -> Result<TapeTrace> {
    let cfg = params.config();
    seq.validate(cfg.vocab_size, cfg.max_tokens)?;
    let mut nodes = Vec::with_capacity(cfg.num_params());
    for (slot, t) in params.iter() {
        nodes.push(tape.param(cfg.param_id(slot), t.clone())?);
    }
    let p = |slot: ParamSlot| nodes[cfg.param_id(slot).0];

    let tok = tape.gather_rows(p(ParamSlot::TokenEmbedding), &seq.ids)?;
    let h0 = at(tape.add(tok, p(ParamSlot::PositionEmbedding)), 0, "embedding")?;

    let mask = causal_mask(cfg.max_tokens);
    let head_dim = cfg.head_dim();
    let score_scale = 1.0 / (head_dim as f64).sqrt();
    let eps = cfg.layernorm_eps;

    let mut x = h0;
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for l in 1..=cfg.num_blocks {
        let w = |bp: BlockParam| p(ParamSlot::Block(l, bp));

        let attn_out = at(
            (|| {
                let a = tape.layernorm(x, w(BlockParam::Ln1Gain), w(BlockParam::Ln1Bias), eps)?;
                let proj = |tape: &mut Tape, wm, bv| -> Result<NodeId> {
                    let y = tape.matmul(a, wm)?;
                    tape.add_row_vector(y, bv)
                };
                let q = proj(tape, w(BlockParam::WQ), w(BlockParam::BQ))?;
                let k = proj(tape, w(BlockParam::WK), w(BlockParam::BK))?;
                let v = proj(tape, w(BlockParam::WV), w(BlockParam::BV))?;
                let mut heads = Vec::with_capacity(cfg.num_heads);
                for h in 0..cfg.num_heads {
                    let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
                    let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                    let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
                    let kt = tape.transpose(kh)?;
                    let scores = tape.matmul(qh, kt)?;
                    let scores = tape.scale(scores, score_scale)?;
                    let probs = tape.softmax_rows(scores, &mask)?;
                    heads.push(tape.matmul(probs, vh)?);
                }
                let merged = tape.concat_cols(&heads)?;
                let o = tape.matmul(merged, w(BlockParam::WOut))?;
                tape.add_row_vector(o, w(BlockParam::BOut))
            })(),
            l,
            "attn_out_proj",
        )?;
        let mid = at(tape.add(x, attn_out), l, "residual")?;

        let b = at(
            tape.layernorm(mid, w(BlockParam::Ln2Gain), w(BlockParam::Ln2Bias), eps),
            l,
            "ln2",
        )?;
        let mlp_hidden = at(
            (|| {
                let f = tape.matmul(b, w(BlockParam::Fc1W))?;
                let f = tape.add_row_vector(f, w(BlockParam::Fc1B))?;
                tape.gelu(f)
            })(),
            l,
            "mlp_hidden",
        )?;
        let mlp_out = at(
            (|| {
                let f = tape.matmul(mlp_hidden, w(BlockParam::Fc2W))?;
                tape.add_row_vector(f, w(BlockParam::Fc2B))
            })(),
            l,
            "mlp_fc2",
        )?;
        let block_out = at(tape.add(mid, mlp_out), l, "block_output")?;
        blocks.push(BlockNodes {
            attn_out,
            mlp_hidden,
            mlp_out,
            block_out,
        });
        x = block_out;
    }

    let final_out = at(
        tape.layernorm(x, p(ParamSlot::FinalLnGain), p(ParamSlot::FinalLnBias), eps),
        cfg.num_blocks,
        "final_layernorm",
    )?;
    Ok(TapeTrace { h0, blocks, final_out })
}

/// Runs the encoder and returns every hook activation.
pub fn forward_with_trace(params: &EncoderParams, seq: &TokenSequence) -> Result<HiddenTrace> {
    let mut tape = Tape::new();
    let trace = record_forward(params, seq, &mut tape)?;
    Ok(trace.to_hidden(&tape))
}
