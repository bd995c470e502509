use serde::{Deserialize, Serialize};

use crate::encoder::{HookKind, SupervisionPoint, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Target,
    NonTarget,
}

impl PromptRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::Target => "target",
            PromptRole::NonTarget => "non_target",
        }
    }
}

/// Block-1 hooks, block-`L` hooks and `h^(L)` (which is `(L, block_output)`).
pub fn shift_probes(num_blocks: usize) -> Vec<SupervisionPoint> {
    let mut probes: Vec<SupervisionPoint> = HookKind::SUPERVISION
        .iter()
        .map(|&k| SupervisionPoint::new(1, k))
        .collect();
    probes.extend(HookKind::SUPERVISION.iter().map(|&k| SupervisionPoint::new(num_blocks, k)));
    probes
}

/// The `h^(L)` probe.
pub fn final_probe(num_blocks: usize) -> SupervisionPoint {
    SupervisionPoint::new(num_blocks, HookKind::BlockOutput)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub prompt: String,
    pub role: PromptRole,
    pub probe: SupervisionPoint,
    /// Token mean of `1 - cos(original_t, erased_t)`.
    pub cosine_distance: f64,
    /// Token mean of `||original_t - erased_t||`.
    pub l2_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub entries: Vec<ShiftEntry>,
}

impl ShiftReport {
    pub fn get(&self, prompt: &str, probe: SupervisionPoint) -> Option<&ShiftEntry> {
        self.entries.iter().find(|e| e.prompt == prompt && e.probe == probe)
    }

    /// Mean cosine distance over every prompt with `role` at `probe`.
    pub fn mean_cosine(&self, role: PromptRole, probe: SupervisionPoint) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.role == role && e.probe == probe)
            .map(|e| e.cosine_distance)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (1.0 - dot / (na * nb)).clamp(0.0, 2.0),
    }
}

/// Token-mean cosine and L2 distances over the first `rows` rows.
pub fn token_mean_distances(a: &Tensor, b: &Tensor, rows: usize) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("token_mean_distances", a.shape(), b.shape()));
    }
    let (t, _) = a.dims2()?;
    if rows == 0 || rows > t {
        return Err(Error::OutOfRange {
            what: "rows",
            index: rows,
            max: t,
        });
    }
    let mut cos = 0.0;
    let mut l2 = 0.0;
    for i in 0..rows {
        let (x, y) = (a.row(i), b.row(i));
        cos += cosine_distance(x, y);
        l2 += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    }
    Ok((cos / rows as f64, l2 / rows as f64))
}

pub(crate) fn check_comparable(original: &TextEncoder, erased: &TextEncoder) -> Result<()> {
    if original.config() != erased.config() {
        return Err(Error::Config(
            "original and erased encoders have different configurations".into(),
        ));
    }
    if original.vocab != erased.vocab {
        return Err(Error::Config("original and erased encoders have different vocabularies".into()));
    }
    Ok(())
}

/// Distances between original and erased activations for every prompt at
/// every probe of [`shift_probes`], over real tokens only.
pub fn representation_shift(
    original: &TextEncoder,
    erased: &TextEncoder,
    prompts: &[String],
    roles: &[PromptRole],
) -> Result<ShiftReport> {
    check_comparable(original, erased)?;
    if prompts.len() != roles.len() {
        return Err(Error::Config(format!(
            "{} prompts but {} roles",
            prompts.len(),
            roles.len()
        )));
    }
    let probes = shift_probes(original.config().num_blocks);
    let mut entries = Vec::with_capacity(prompts.len() * probes.len());
    for (prompt, &role) in prompts.iter().zip(roles) {
        let (seq, a) = original.trace(prompt)?;
        let (_, b) = erased.trace(prompt)?;
        for &probe in &probes {
            let (cosine_distance, l2_distance) =
                token_mean_distances(a.hook(probe)?, b.hook(probe)?, seq.real_len)?;
            entries.push(ShiftEntry {
                prompt: prompt.clone(),
                role,
                probe,
                cosine_distance,
                l2_distance,
            });
        }
    }
    Ok(ShiftReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BlockParam, EncoderConfig, ParamSlot};

    fn encoder() -> TextEncoder {
        let cfg = EncoderConfig {
            num_blocks: 3,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            max_tokens: 6,
            ..EncoderConfig::default()
        };
        TextEncoder::init(&cfg, &["red car blue sky green tree"]).unwrap()
    }

    fn perturbed(enc: &TextEncoder) -> TextEncoder {
        let mut p = enc.params.clone();
        let id = p.config().param_id(ParamSlot::Block(1, BlockParam::Fc2B));
        p.by_id_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.3);
        enc.with_params(p)
    }

    fn prompts() -> (Vec<String>, Vec<PromptRole>) {
        (
            vec!["red car".into(), "blue sky".into()],
            vec![PromptRole::Target, PromptRole::NonTarget],
        )
    }

    #[test]
    fn identical_encoders_have_zero_shift() {
        let enc = encoder();
        let (p, r) = prompts();
        let rep = representation_shift(&enc, &enc, &p, &r).unwrap();
        assert_eq!(rep.entries.len(), 2 * 6);
        assert!(rep.entries.iter().all(|e| e.cosine_distance == 0.0 && e.l2_distance == 0.0));
    }

    #[test]
    fn symmetric_in_argument_order() {
        let enc = encoder();
        let other = perturbed(&enc);
        let (p, r) = prompts();
        let ab = representation_shift(&enc, &other, &p, &r).unwrap();
        let ba = representation_shift(&other, &enc, &p, &r).unwrap();
        for (x, y) in ab.entries.iter().zip(&ba.entries) {
            assert!((x.cosine_distance - y.cosine_distance).abs() < 1e-15);
            assert!((x.l2_distance - y.l2_distance).abs() < 1e-15);
            assert!((0.0..=2.0).contains(&x.cosine_distance));
        }
        let fin = final_probe(3);
        assert!(ab.get("red car", fin).unwrap().l2_distance > 0.0);
        assert!(ab.mean_cosine(PromptRole::NonTarget, fin).unwrap() > 0.0);
    }

    #[test]
    fn config_mismatch_errors() {
        let enc = encoder();
        let (p, r) = prompts();
        let cfg = EncoderConfig {
            max_tokens: 7,
            ..enc.config().clone()
        };
        let other = TextEncoder::init(&cfg, &["red car blue sky green tree"]).unwrap();
        assert!(representation_shift(&enc, &other, &p, &r).is_err());
        assert!(representation_shift(&enc, &enc, &p, &r[..1]).is_err());
    }

    #[test]
    fn only_real_tokens_count() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![-5.0, 0.0]]).unwrap();
        let (cos, l2) = token_mean_distances(&a, &b, 1).unwrap();
        assert!((cos - 1.0).abs() < 1e-15);
        assert!((l2 - 2f64.sqrt()).abs() < 1e-15);
        let (cos, _) = token_mean_distances(&a, &a.map(|v| -v), 2).unwrap();
        assert_eq!(cos, 2.0);
        assert!(token_mean_distances(&a, &b, 3).is_err());
    }
}
