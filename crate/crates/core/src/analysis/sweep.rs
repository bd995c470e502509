use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shift::{final_probe, representation_shift, PromptRole};
use crate::encoder::{EncoderConfig, HookKind, SupervisionPoint, TextEncoder};
use crate::error::{Error, Result};
use crate::misdirection::{train, ErasureRun, TargetBuilder, TrainConfig};

pub const SEED_GRID: [u64; 5] = [42, 52, 62, 72, 82];
pub const COEFFICIENT_GRID: [f64; 5] = [300.0, 400.0, 500.0, 600.0, 700.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SupervisionPoint,
    Seed,
    Coefficient,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" | "supervision_point" | "supervision" => Ok(SweepAxis::SupervisionPoint),
            "seed" => Ok(SweepAxis::Seed),
            "coefficient" | "coef" => Ok(SweepAxis::Coefficient),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "value", rename_all = "snake_case")]
pub enum SweepSetting {
    SupervisionPoint(SupervisionPoint),
    /// Used as both the encoder init seed and the training seed.
    Seed(u64),
    Coefficient(f64),
}

impl SweepSetting {
    pub fn axis(&self) -> SweepAxis {
        match self {
            SweepSetting::SupervisionPoint(_) => SweepAxis::SupervisionPoint,
            SweepSetting::Seed(_) => SweepAxis::Seed,
            SweepSetting::Coefficient(_) => SweepAxis::Coefficient,
        }
    }

    /// Encoder and training configuration for this setting.
    pub fn apply(&self, base: &SweepBase) -> (EncoderConfig, TrainConfig) {
        let mut enc = base.encoder.clone();
        let mut tc = base.train.clone();
        match *self {
            SweepSetting::SupervisionPoint(sp) => tc.supervision = sp,
            SweepSetting::Seed(s) => {
                enc.init_seed = s;
                tc.seed = s;
            }
            SweepSetting::Coefficient(c) => tc.coefficient = c,
        }
        (enc, tc)
    }
}

impl fmt::Display for SweepSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepSetting::SupervisionPoint(sp) => write!(f, "{sp}"),
            SweepSetting::Seed(s) => write!(f, "seed={s}"),
            SweepSetting::Coefficient(c) => write!(f, "c={c}"),
        }
    }
}

/// Blocks `{1, 2, 3, L-2, L-1, L}` (those that exist) crossed with
/// `{attn_out_proj, mlp_fc2}`.
pub fn layer_grid(num_blocks: usize) -> Vec<SweepSetting> {
    let l = num_blocks as isize;
    let mut blocks: Vec<usize> = [1, 2, 3, l - 2, l - 1, l]
        .into_iter()
        .filter(|&b| b >= 1 && b <= l)
        .map(|b| b as usize)
        .collect();
    blocks.sort_unstable();
    blocks.dedup();
    blocks
        .into_iter()
        .flat_map(|b| {
            [HookKind::AttnOutProj, HookKind::MlpFc2]
                .into_iter()
                .map(move |k| SweepSetting::SupervisionPoint(SupervisionPoint::new(b, k)))
        })
        .collect()
}

pub fn default_grid(axis: SweepAxis, num_blocks: usize) -> Vec<SweepSetting> {
    match axis {
        SweepAxis::SupervisionPoint => layer_grid(num_blocks),
        SweepAxis::Seed => SEED_GRID.iter().map(|&s| SweepSetting::Seed(s)).collect(),
        SweepAxis::Coefficient => COEFFICIENT_GRID.iter().map(|&c| SweepSetting::Coefficient(c)).collect(),
    }
}

/// Everything a sweep setting is applied to.
#[derive(Clone, Debug)]
pub struct SweepBase {
    pub encoder: EncoderConfig,
    pub corpus: Vec<String>,
    pub train: TrainConfig,
    pub builder: TargetBuilder,
}

#[derive(Clone, Debug, Default)]
pub struct SweepPrompts {
    pub targets: Vec<String>,
    pub non_targets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub initial_loss: f64,
    pub target_final_loss: f64,
    pub epochs_run: usize,
    /// Mean `h^(L)` cosine shift of the target prompts.
    pub target_shift: f64,
    /// Mean `h^(L)` cosine shift of the non-target prompts.
    pub mean_non_target_shift: f64,
}

impl SweepOutcome {
    pub fn loss_ratio(&self) -> f64 {
        self.target_final_loss / self.initial_loss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub setting: SweepSetting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<SweepOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, setting: &SweepSetting) -> Option<&SweepRow> {
        self.rows.iter().find(|r| &r.setting == setting)
    }
}

/// Summarizes a finished run with `h^(L)` shifts of both prompt groups.
pub fn summarize(run: &ErasureRun, prompts: &SweepPrompts) -> Result<SweepOutcome> {
    let mut all = prompts.targets.clone();
    all.extend(prompts.non_targets.iter().cloned());
    let mut roles = vec![PromptRole::Target; prompts.targets.len()];
    roles.extend(vec![PromptRole::NonTarget; prompts.non_targets.len()]);
    let report = representation_shift(&run.original, &run.erased, &all, &roles)?;
    let probe = final_probe(run.original.config().num_blocks);
    Ok(SweepOutcome {
        initial_loss: run.initial_loss,
        target_final_loss: run.final_loss,
        epochs_run: run.epochs_run(),
        target_shift: report.mean_cosine(PromptRole::Target, probe).unwrap_or(0.0),
        mean_non_target_shift: report.mean_cosine(PromptRole::NonTarget, probe).unwrap_or(0.0),
    })
}

/// Trains and measures one setting from scratch.
pub fn run_setting(base: &SweepBase, prompts: &SweepPrompts, setting: &SweepSetting) -> Result<SweepOutcome> {
    let (enc_cfg, tc) = setting.apply(base);
    let encoder = TextEncoder::init(&enc_cfg, &base.corpus)?;
    let run = train(&encoder, &prompts.targets, &base.builder, &tc)?;
    summarize(&run, prompts)
}

/// Runs every grid setting independently. A failing setting is recorded in
/// its row and the remaining settings still run.
pub fn sweep(
    axis: SweepAxis,
    grid: &[SweepSetting],
    base: &SweepBase,
    prompts: &SweepPrompts,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if let Some(s) = grid.iter().find(|s| s.axis() != axis) {
        return Err(Error::Config(format!("setting {s} does not belong to the {axis:?} axis")));
    }
    let rows = grid
        .par_iter()
        .map(|setting| {
            let label = setting.to_string();
            match run_setting(base, prompts, setting) {
                Ok(outcome) => SweepRow {
                    label,
                    setting: *setting,
                    outcome: Some(outcome),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep setting {label} failed: {e}");
                    SweepRow {
                        label,
                        setting: *setting,
                        outcome: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(SweepResult { axis, rows })
}
