use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::loss::record_hirm_loss;
use super::target::{
    build_safety_target, build_semantic_target, compute_empirical_concept_vector,
    sample_random_target, MisdirectionTarget, TargetKind,
};
use crate::encoder::{
    record_forward, EncoderParams, HookKind, SupervisionPoint, TextEncoder, TokenSequence,
};
use crate::error::{Error, Result};
use crate::tensor::{GradMap, ParamId, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Maximum number of passes over the prompts.
    pub epochs: usize,
    pub coefficient: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 1-based block indices whose parameters are updated.
    pub trainable_blocks: BTreeSet<usize>,
    pub supervision: SupervisionPoint,
    pub loss_over_all_slots: bool,
    /// Stop once an epoch's mean loss falls to this fraction of the initial
    /// loss. Used to compare settings at matched loss reduction.
    #[serde(default)]
    pub target_loss_ratio: Option<f64>,
}

impl TrainConfig {
    fn base(num_blocks: usize, epochs: usize, coefficient: f64) -> Self {
        Self {
            learning_rate: 5e-5,
            epochs,
            coefficient,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            trainable_blocks: BTreeSet::from([1]),
            supervision: SupervisionPoint::default_for(num_blocks),
            loss_over_all_slots: true,
            target_loss_ratio: None,
        }
    }

    /// Random misdirection: lr 5e-5, c = 500, 40 epochs.
    pub fn hirm_r(num_blocks: usize) -> Self {
        Self::base(num_blocks, 40, TargetKind::Random.default_coefficient())
    }

    /// Semantic misdirection: lr 5e-5, c = 1, 30 epochs.
    pub fn hirm_s(num_blocks: usize) -> Self {
        Self::base(num_blocks, 30, TargetKind::Semantic.default_coefficient())
    }

    /// Early-layer variant: random targets on the first block's `fc2` output.
    pub fn diff_q_star(num_blocks: usize) -> Self {
        Self {
            supervision: SupervisionPoint::new(1, HookKind::MlpFc2),
            ..Self::hirm_r(num_blocks)
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !self.coefficient.is_finite() {
            return fail("coefficient must be finite".into());
        }
        if self.trainable_blocks.is_empty() {
            return fail("trainable_blocks is empty".into());
        }
        for &b in &self.trainable_blocks {
            if b == 0 || b > num_blocks {
                return Err(Error::OutOfRange {
                    what: "trainable block",
                    index: b,
                    max: num_blocks,
                });
            }
        }
        if let Some(r) = self.target_loss_ratio {
            if !(r > 0.0 && r < 1.0) {
                return fail(format!("target_loss_ratio {r} must lie in (0, 1)"));
            }
        }
        self.supervision.check(num_blocks)
    }
}

/// How per-prompt targets are constructed before training starts.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetBuilder {
    /// Fresh unit-random rows per prompt, seeded from the run seed.
    Random,
    /// One guided prompt shared by all targets, or one per target prompt.
    Semantic { guided_prompts: Vec<String> },
    /// Each target prompt's own activation minus the empirical concept vector
    /// of these `(with, without)` pairs.
    Safety { concept_pairs: Vec<(String, String)> },
}

impl TargetBuilder {
    pub fn kind(&self) -> TargetKind {
        match self {
            TargetBuilder::Random => TargetKind::Random,
            TargetBuilder::Semantic { .. } => TargetKind::Semantic,
            TargetBuilder::Safety { .. } => TargetKind::Safety,
        }
    }

    /// Builds every target on the frozen `reference` encoder.
    pub fn build(
        &self,
        reference: &TextEncoder,
        prompts: &[String],
        config: &TrainConfig,
    ) -> Result<Vec<MisdirectionTarget>> {
        let sp = config.supervision;
        let targets = match self {
            TargetBuilder::Random => {
                let (_, t) = reference.trace("")?;
                let (rows, width) = t.hook(sp)?.dims2()?;
                let mut seeds = ChaCha20Rng::seed_from_u64(config.seed);
                prompts
                    .iter()
                    .map(|_| sample_random_target(rows, width, seeds.next_u64()))
                    .collect()
            }
            TargetBuilder::Semantic { guided_prompts } => {
                let pick = |i: usize| -> Result<&String> {
                    match guided_prompts.len() {
                        1 => Ok(&guided_prompts[0]),
                        n if n == prompts.len() => Ok(&guided_prompts[i]),
                        n => Err(Error::Config(format!(
                            "{n} guided prompts for {} target prompts",
                            prompts.len()
                        ))),
                    }
                };
                (0..prompts.len())
                    .map(|i| build_semantic_target(reference, pick(i)?, sp))
                    .collect::<Result<Vec<_>>>()?
            }
            TargetBuilder::Safety { concept_pairs } => {
                let ve = compute_empirical_concept_vector(reference, concept_pairs, sp)?;
                prompts
                    .iter()
                    .map(|p| build_safety_target(reference, p, &ve, sp))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(targets
            .into_iter()
            .map(|t| t.with_coefficient(config.coefficient))
            .collect())
    }
}

/// Bias-corrected Adam with per-parameter moment state.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter present in `grads`.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &GradMap) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads.iter() {
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let p = params.by_id_mut(id).data_mut();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Result of one erasure run.
#[derive(Clone, Debug)]
pub struct ErasureRun {
    pub original: TextEncoder,
    pub erased: TextEncoder,
    /// Mean pre-update loss over prompts, one entry per completed epoch.
    pub loss_curve: Vec<f64>,
    /// Mean loss of the original parameters.
    pub initial_loss: f64,
    /// Mean loss of the erased parameters.
    pub final_loss: f64,
    pub config: TrainConfig,
    pub target_prompts: Vec<String>,
    pub targets: Vec<MisdirectionTarget>,
}

impl ErasureRun {
    pub fn epochs_run(&self) -> usize {
        self.loss_curve.len()
    }
}

fn prompt_loss(
    params: &EncoderParams,
    seq: &TokenSequence,
    target: &MisdirectionTarget,
    config: &TrainConfig,
) -> Result<(Tape, crate::tensor::NodeId)> {
    let mut tape = Tape::new();
    let trace = record_forward(params, seq, &mut tape)?;
    let h = trace.hook(config.supervision)?;
    let loss = record_hirm_loss(&mut tape, h, target, config.loss_over_all_slots, seq.real_len)?;
    Ok((tape, loss))
}

/// Mean misdirection loss of `params` over prompts and their targets.
pub fn mean_loss(
    params: &EncoderParams,
    seqs: &[TokenSequence],
    targets: &[MisdirectionTarget],
    config: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (seq, target) in seqs.iter().zip(targets) {
        let (tape, loss) = prompt_loss(params, seq, target, config)?;
        total += tape.value(loss).item()?;
    }
    Ok(total / seqs.len() as f64)
}

/// Fine-tunes only `config.trainable_blocks` so that the supervised activation
/// of each target prompt moves toward its misdirection target.
///
/// Targets are built once on the untouched encoder. Prompts are visited in
/// order, one optimizer step each. No retain set is used.
pub fn train(
    reference: &TextEncoder,
    target_prompts: &[String],
    builder: &TargetBuilder,
    config: &TrainConfig,
) -> Result<ErasureRun> {
    if target_prompts.is_empty() {
        return Err(Error::Config("no target prompts".into()));
    }
    let cfg = reference.config();
    config.validate(cfg.num_blocks)?;

    let seqs = target_prompts
        .iter()
        .map(|p| reference.tokenize(p))
        .collect::<Result<Vec<_>>>()?;
    let targets = builder.build(reference, target_prompts, config)?;
    let trainable: BTreeSet<ParamId> = cfg
        .block_param_ids(config.trainable_blocks.iter().copied())
        .into_iter()
        .collect();

    let initial_loss = mean_loss(&reference.params, &seqs, &targets, config)?;
    let mut params = reference.params.clone();
    let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for ((seq, target), prompt) in seqs.iter().zip(&targets).zip(target_prompts) {
            let wrap = |e: Error| Error::Training {
                epoch,
                prompt: prompt.clone(),
                source: Box::new(e),
            };
            let (mut tape, loss) = prompt_loss(&params, seq, target, config).map_err(wrap)?;
            let value = tape.value(loss).item().map_err(wrap)?;
            if !value.is_finite() {
                return Err(wrap(Error::NonFinite {
                    context: "misdirection loss".into(),
                }));
            }
            total += value;
            let grads = tape.backward(loss, &trainable).map_err(wrap)?;
            adam.step(&mut params, &grads);
        }
        let epoch_loss = total / seqs.len() as f64;
        loss_curve.push(epoch_loss);
        log::debug!("epoch {epoch}: loss {epoch_loss:.6e}");
        if let Some(ratio) = config.target_loss_ratio {
            if epoch_loss <= ratio * initial_loss {
                break;
            }
        }
    }

    let final_loss = mean_loss(&params, &seqs, &targets, config)?;
    Ok(ErasureRun {
        original: reference.clone(),
        erased: reference.with_params(params),
        loss_curve,
        initial_loss,
        final_loss,
        config: config.clone(),
        target_prompts: target_prompts.to_vec(),
        targets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FreezeEntry {
    pub name: String,
    pub trainable: bool,
    pub max_abs_diff: f64,
}

/// Per-parameter difference between original and erased parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FreezeReport {
    pub entries: Vec<FreezeEntry>,
}

impl FreezeReport {
    pub fn get(&self, name: &str) -> Option<&FreezeEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Compares two parameter sets; every parameter outside `trainable_blocks`
/// must be bit-identical.
pub fn compare_frozen(
    original: &EncoderParams,
    erased: &EncoderParams,
    trainable_blocks: &BTreeSet<usize>,
) -> Result<FreezeReport> {
    if original.config() != erased.config() {
        return Err(Error::Config("parameter sets have different configs".into()));
    }
    let mut entries = Vec::new();
    for ((slot, a), (_, b)) in original.iter().zip(erased.iter()) {
        let trainable = slot.block().is_some_and(|l| trainable_blocks.contains(&l));
        let max_abs_diff = a.max_abs_diff(b)?;
        if !trainable && !a.bit_eq(b) {
            return Err(Error::FrozenViolation {
                name: slot.to_string(),
                max_abs_diff,
            });
        }
        entries.push(FreezeEntry {
            name: slot.to_string(),
            trainable,
            max_abs_diff,
        });
    }
    Ok(FreezeReport { entries })
}

pub fn assert_frozen(run: &ErasureRun) -> Result<FreezeReport> {
    compare_frozen(
        &run.original.params,
        &run.erased.params,
        &run.config.trainable_blocks,
    )
}
