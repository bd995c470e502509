use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{SupervisionPoint, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default steering coefficient for random targets.
pub const RANDOM_COEFFICIENT: f64 = 500.0;
/// Default steering coefficient for semantic and safety targets.
pub const SEMANTIC_COEFFICIENT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Random,
    Semantic,
    Safety,
}

impl TargetKind {
    pub fn default_coefficient(self) -> f64 {
        match self {
            TargetKind::Random => RANDOM_COEFFICIENT,
            TargetKind::Semantic | TargetKind::Safety => SEMANTIC_COEFFICIENT,
        }
    }
}

/// Per-token target rows for the supervised activation, and the steering
/// coefficient `c` applied to them inside the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MisdirectionTarget {
    pub matrix: Tensor,
    pub kind: TargetKind,
    pub coefficient: f64,
}

impl MisdirectionTarget {
    pub fn with_coefficient(self, coefficient: f64) -> Self {
        Self { coefficient, ..self }
    }

    /// `c * matrix`.
    pub fn scaled(&self) -> Tensor {
        self.matrix.map(|v| v * self.coefficient)
    }
}

/// Rows drawn i.i.d. from `N(0, I_d)` and normalized to unit length.
pub fn sample_random_target(t: usize, d: usize, seed: u64) -> MisdirectionTarget {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    MisdirectionTarget {
        matrix: Tensor::new(vec![t, d], data).expect("t*d entries"),
        kind: TargetKind::Random,
        coefficient: RANDOM_COEFFICIENT,
    }
}

/// The guided prompt's activation at `supervision` on the frozen reference
/// encoder.
pub fn build_semantic_target(
    reference: &TextEncoder,
    guided_prompt: &str,
    supervision: SupervisionPoint,
) -> Result<MisdirectionTarget> {
    let (_, trace) = reference.trace(guided_prompt)?;
    Ok(MisdirectionTarget {
        matrix: trace.hook(supervision)?.clone(),
        kind: TargetKind::Semantic,
        coefficient: SEMANTIC_COEFFICIENT,
    })
}

/// Mean activation difference between prompts with and without a concept.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalConceptVector {
    pub matrix: Tensor,
    pub supervision: SupervisionPoint,
    /// `(with concept, without concept)` prompt pairs.
    pub source: Vec<(String, String)>,
}

pub fn compute_empirical_concept_vector(
    reference: &TextEncoder,
    pairs: &[(String, String)],
    supervision: SupervisionPoint,
) -> Result<EmpiricalConceptVector> {
    if pairs.is_empty() {
        return Err(Error::Config("empirical concept vector needs at least one prompt pair".into()));
    }
    let mut acc: Option<Tensor> = None;
    for (with, without) in pairs {
        let (_, tw) = reference.trace(with)?;
        let (_, tn) = reference.trace(without)?;
        let diff = tw.hook(supervision)?.zip_map(tn.hook(supervision)?, |a, b| a - b)?;
        acc = Some(match acc {
            None => diff,
            Some(sum) => sum.zip_map(&diff, |a, b| a + b)?,
        });
    }
    let n = pairs.len() as f64;
    let sum = acc.expect("non-empty pairs");
    let matrix = if pairs.len() == 1 { sum } else { sum.map(|v| v / n) };
    Ok(EmpiricalConceptVector {
        matrix,
        supervision,
        source: pairs.to_vec(),
    })
}

/// `Z - V_e`, where `Z` is the concept prompt's activation on the reference
/// encoder.
pub fn build_safety_target(
    reference: &TextEncoder,
    concept_prompt: &str,
    concept_vector: &EmpiricalConceptVector,
    supervision: SupervisionPoint,
) -> Result<MisdirectionTarget> {
    if concept_vector.supervision != supervision {
        return Err(Error::Config(format!(
            "concept vector computed at {} but safety target requested at {}",
            concept_vector.supervision, supervision
        )));
    }
    let (_, trace) = reference.trace(concept_prompt)?;
    let z = trace.hook(supervision)?;
    Ok(MisdirectionTarget {
        matrix: z.zip_map(&concept_vector.matrix, |a, b| a - b)?,
        kind: TargetKind::Safety,
        coefficient: SEMANTIC_COEFFICIENT,
    })
}
