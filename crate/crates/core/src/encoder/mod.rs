//! CLIP-style causal text encoder: word-level tokenizer, pre-norm transformer
//! blocks, final layernorm, and a trace of every hook activation.

mod forward;
mod params;
pub mod vocab;

pub use forward::{
    forward_with_trace, hook, record_forward, BlockNodes, BlockTrace, HiddenTrace, HookKind,
    SupervisionPoint, TapeTrace,
};
pub use params::{BlockParam, EncoderConfig, EncoderParams, ParamSlot};
pub use vocab::{TokenSequence, Vocab};

use crate::error::Result;

/// Parameters together with the vocabulary they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vocab,
    pub params: EncoderParams,
}

impl TextEncoder {
    /// Builds a vocabulary from `corpus` and initializes parameters with
    /// `config` (whose `vocab_size` is overwritten).
    pub fn init<S: AsRef<str>>(config: &EncoderConfig, corpus: &[S]) -> Result<Self> {
        let vocab = Vocab::build(corpus);
        let config = EncoderConfig {
            vocab_size: vocab.len(),
            ..config.clone()
        };
        Ok(Self {
            params: EncoderParams::init(&config)?,
            vocab,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.params.config()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.vocab.tokenize(text, self.config().max_tokens)
    }

    pub fn trace(&self, text: &str) -> Result<(TokenSequence, HiddenTrace)> {
        let seq = self.tokenize(text)?;
        let trace = forward_with_trace(&self.params, &seq)?;
        Ok((seq, trace))
    }

    /// Same vocabulary, different parameters.
    pub fn with_params(&self, params: EncoderParams) -> Self {
        Self {
            vocab: self.vocab.clone(),
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> TextEncoder {
        let cfg = EncoderConfig {
            num_blocks: 3,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            max_tokens: 6,
            ..EncoderConfig::default()
        };
        TextEncoder::init(&cfg, &["a b c d e f g"]).unwrap()
    }

    #[test]
    fn trace_shapes_and_final_relation() {
        let enc = small();
        let (_, tr) = enc.trace("a b c").unwrap();
        assert_eq!(tr.num_blocks(), 3);
        assert_eq!(tr.h0.shape(), &[6, 8]);
        assert_eq!(tr.blocks[0].mlp_hidden.shape(), &[6, 16]);
        // (L, block_output) is h^(L), the post-layernorm view of block L's output.
        let last = SupervisionPoint::new(3, HookKind::BlockOutput);
        assert!(tr.hook(last).unwrap().bit_eq(&tr.final_out));
        for row in tr.final_out.rows() {
            let mean = row.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
        }
        let mid = SupervisionPoint::new(2, HookKind::BlockOutput);
        assert!(tr.hook(mid).unwrap().bit_eq(&tr.blocks[1].block_out));
    }

    #[test]
    fn hook_accessors() {
        let enc = small();
        let (_, tr) = enc.trace("b d").unwrap();
        let p = SupervisionPoint::new(3, HookKind::AttnOutProj);
        assert!(tr.hook(p).unwrap().bit_eq(&tr.blocks[2].attn_out));
        let p = SupervisionPoint::new(1, HookKind::MlpFc2);
        assert!(hook(&tr, p).unwrap().bit_eq(&tr.blocks[0].mlp_out));
        assert!(tr.hook(SupervisionPoint::new(4, HookKind::MlpFc2)).is_err());
        assert!(tr.hook(SupervisionPoint::new(0, HookKind::MlpFc2)).is_err());
    }

    #[test]
    fn causal_rows_unchanged_by_later_tokens() {
        let enc = small();
        let (_, a) = enc.trace("a b c d").unwrap();
        let (_, b) = enc.trace("a b g d").unwrap();
        // Position 3 holds the changed token; rows 0..3 must be bit-identical.
        let rows = |t: &Tensor| t.take_rows(3).unwrap();
        for l in 0..3 {
            assert!(rows(&a.blocks[l].attn_out).bit_eq(&rows(&b.blocks[l].attn_out)));
            assert!(rows(&a.blocks[l].block_out).bit_eq(&rows(&b.blocks[l].block_out)));
        }
        assert!(rows(&a.final_out).bit_eq(&rows(&b.final_out)));
        assert!(!a.blocks[0].attn_out.row(3).eq(b.blocks[0].attn_out.row(3)));
    }

    #[test]
    fn forward_is_deterministic() {
        let enc = small();
        assert_eq!(enc.trace("c a f").unwrap(), enc.trace("c a f").unwrap());
    }

    #[test]
    fn hook_point_parsing() {
        let p: SupervisionPoint = "4-attn_out_proj".parse().unwrap();
        assert_eq!(p, SupervisionPoint::new(4, HookKind::AttnOutProj));
        let p: SupervisionPoint = "1-mlp-fc2".parse().unwrap();
        assert_eq!(p, SupervisionPoint::new(1, HookKind::MlpFc2));
        assert_eq!(p.to_string(), "1-mlp_fc2");
        assert!("x-fc2".parse::<SupervisionPoint>().is_err());
        assert!("2-nothing".parse::<SupervisionPoint>().is_err());
    }

    #[test]
    fn non_finite_activation_names_block_and_hook() {
        let enc = small();
        let mut params = enc.params.clone();
        let id = params.config().param_id(ParamSlot::Block(2, BlockParam::Fc1B));
        params.by_id_mut(id).data_mut()[0] = f64::MAX;
        let id = params.config().param_id(ParamSlot::Block(2, BlockParam::Fc2W));
        params.by_id_mut(id).data_mut()[..8].fill(100.0);
        let seq = enc.tokenize("a b").unwrap();
        let err = forward_with_trace(&params, &seq).unwrap_err().to_string();
        assert!(err.contains("block 2 mlp_fc2"), "{err}");
    }
}
