use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{jaccard_probes, DEFAULT_TOP_K};
use crate::encoder::{EncoderConfig, HookKind, SupervisionPoint};
use crate::error::{Error, Result};
use crate::misdirection::{TargetBuilder, TargetKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    #[serde(alias = "L")]
    pub blocks: usize,
    #[serde(alias = "d")]
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    #[serde(alias = "T")]
    pub max_tokens: usize,
    pub seed: u64,
    pub layernorm_eps: f64,
    /// Extra text whose words join the vocabulary alongside every prompt.
    pub corpus: Vec<String>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            blocks: d.num_blocks,
            dim: d.model_dim,
            heads: d.num_heads,
            ff_dim: d.ff_dim,
            max_tokens: d.max_tokens,
            seed: d.init_seed,
            layernorm_eps: d.layernorm_eps,
            corpus: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EraseSection {
    pub mode: TargetKind,
    pub prompts: Vec<String>,
    pub guided_prompts: Vec<String>,
    pub concept_pairs: Vec<(String, String)>,
    pub lr: f64,
    pub epochs: Option<usize>,
    pub coefficient: Option<f64>,
    pub supervision_block: Option<usize>,
    pub supervision_hook: HookKind,
    pub loss_over_all_slots: bool,
    pub seed: u64,
    pub trainable_blocks: Vec<usize>,
    pub target_loss_ratio: Option<f64>,
}

impl Default for EraseSection {
    fn default() -> Self {
        Self {
            mode: TargetKind::Random,
            prompts: Vec::new(),
            guided_prompts: Vec::new(),
            concept_pairs: Vec::new(),
            lr: 5e-5,
            epochs: None,
            coefficient: None,
            supervision_block: None,
            supervision_hook: HookKind::AttnOutProj,
            loss_over_all_slots: true,
            seed: 42,
            trainable_blocks: vec![1],
            target_loss_ratio: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Jaccard probe points such as `"1-mlp_hidden"`; empty means block 1
    /// and block `L` MLP hidden units.
    pub probes: Vec<String>,
    pub k: Option<usize>,
    pub non_target_prompts: Vec<String>,
}

/// Contents of a run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub encoder: EncoderSection,
    pub erase: EraseSection,
    pub analyze: AnalyzeSection,
}

/// Default epoch count per target kind.
pub fn default_epochs(kind: TargetKind) -> usize {
    match kind {
        TargetKind::Random => 40,
        TargetKind::Semantic => 30,
        TargetKind::Safety => 25,
    }
}

impl RunConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigFile {
            path: path.into(),
            message: e.to_string(),
        })?;
        cfg.encoder_config().map_err(|e| Error::ConfigFile {
            path: path.into(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::parse(&text, path)
    }

    /// Encoder configuration; `vocab_size` is a placeholder until the
    /// vocabulary is built.
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let e = &self.encoder;
        let cfg = EncoderConfig {
            num_blocks: e.blocks,
            model_dim: e.dim,
            num_heads: e.heads,
            ff_dim: e.ff_dim,
            vocab_size: EncoderConfig::default().vocab_size,
            max_tokens: e.max_tokens,
            layernorm_eps: e.layernorm_eps,
            init_seed: e.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every prompt mentioned anywhere in the file plus the extra corpus.
    pub fn vocab_corpus(&self) -> Vec<String> {
        let mut out = self.encoder.corpus.clone();
        out.extend(self.erase.prompts.iter().cloned());
        out.extend(self.erase.guided_prompts.iter().cloned());
        for (a, b) in &self.erase.concept_pairs {
            out.push(a.clone());
            out.push(b.clone());
        }
        out.extend(self.analyze.non_target_prompts.iter().cloned());
        out
    }

    pub fn supervision(&self) -> SupervisionPoint {
        SupervisionPoint::new(
            self.erase.supervision_block.unwrap_or(self.encoder.blocks),
            self.erase.supervision_hook,
        )
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let e = &self.erase;
        let base = match e.mode {
            TargetKind::Random => TrainConfig::hirm_r(self.encoder.blocks),
            TargetKind::Semantic | TargetKind::Safety => TrainConfig::hirm_s(self.encoder.blocks),
        };
        let tc = TrainConfig {
            learning_rate: e.lr,
            epochs: e.epochs.unwrap_or(default_epochs(e.mode)),
            coefficient: e.coefficient.unwrap_or(e.mode.default_coefficient()),
            seed: e.seed,
            trainable_blocks: e.trainable_blocks.iter().copied().collect::<BTreeSet<_>>(),
            supervision: self.supervision(),
            loss_over_all_slots: e.loss_over_all_slots,
            target_loss_ratio: e.target_loss_ratio,
            ..base
        };
        tc.validate(self.encoder.blocks)?;
        Ok(tc)
    }

    pub fn target_builder(&self) -> Result<TargetBuilder> {
        let e = &self.erase;
        Ok(match e.mode {
            TargetKind::Random => TargetBuilder::Random,
            TargetKind::Semantic => {
                if e.guided_prompts.is_empty() {
                    return Err(Error::Config("semantic mode needs guided_prompts".into()));
                }
                TargetBuilder::Semantic {
                    guided_prompts: e.guided_prompts.clone(),
                }
            }
            TargetKind::Safety => {
                if e.concept_pairs.is_empty() {
                    return Err(Error::Config("safety mode needs concept_pairs".into()));
                }
                TargetBuilder::Safety {
                    concept_pairs: e.concept_pairs.clone(),
                }
            }
        })
    }

    pub fn jaccard_probes(&self) -> Result<Vec<SupervisionPoint>> {
        if self.analyze.probes.is_empty() {
            return Ok(jaccard_probes(self.encoder.blocks));
        }
        self.analyze
            .probes
            .iter()
            .map(|s| {
                let p: SupervisionPoint = s.parse()?;
                p.check(self.encoder.blocks)?;
                Ok(p)
            })
            .collect()
    }

    pub fn top_k(&self) -> usize {
        self.analyze.k.unwrap_or(DEFAULT_TOP_K)
    }
}
