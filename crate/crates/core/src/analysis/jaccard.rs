use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::shift::check_comparable;
use crate::encoder::{HookKind, SupervisionPoint, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 50;

/// The MLP hidden units of block 1 and block `L`.
pub fn jaccard_probes(num_blocks: usize) -> Vec<SupervisionPoint> {
    vec![
        SupervisionPoint::new(1, HookKind::MlpHidden),
        SupervisionPoint::new(num_blocks, HookKind::MlpHidden),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardEntry {
    pub prompt: String,
    pub probe: SupervisionPoint,
    /// Effective `k` after clamping to the neuron count.
    pub k: usize,
    pub original: Vec<usize>,
    pub erased: Vec<usize>,
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets give 1.
pub fn jaccard_index(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Mean absolute activation of every column over the first `rows` rows.
pub fn neuron_scores(activation: &Tensor, rows: usize) -> Result<Vec<f64>> {
    let (t, n) = activation.dims2()?;
    if rows == 0 || rows > t {
        return Err(Error::OutOfRange {
            what: "rows",
            index: rows,
            max: t,
        });
    }
    let mut scores = vec![0.0; n];
    for row in activation.rows().take(rows) {
        for (s, v) in scores.iter_mut().zip(row) {
            *s += v.abs();
        }
    }
    scores.iter_mut().for_each(|s| *s /= rows as f64);
    Ok(scores)
}

/// Indices of the `k` largest scores, ascending. Equal scores prefer the
/// lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Overlap of the top-`k` most active units at `probe` before and after
/// erasure.
pub fn jaccard_topk(
    original: &TextEncoder,
    erased: &TextEncoder,
    prompt: &str,
    probe: SupervisionPoint,
    k: usize,
) -> Result<JaccardEntry> {
    check_comparable(original, erased)?;
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let (seq, a) = original.trace(prompt)?;
    let (_, b) = erased.trace(prompt)?;
    let sa = neuron_scores(a.hook(probe)?, seq.real_len)?;
    let sb = neuron_scores(b.hook(probe)?, seq.real_len)?;
    let n = sa.len();
    let mut warning = None;
    let k_eff = if k > n {
        let msg = format!("k = {k} exceeds the {n} units at {probe}; clamped to {n}");
        log::warn!("{msg}");
        warning = Some(msg);
        n
    } else {
        k
    };
    let top_a = top_k_indices(&sa, k_eff);
    let top_b = top_k_indices(&sb, k_eff);
    Ok(JaccardEntry {
        prompt: prompt.to_string(),
        probe,
        k: k_eff,
        ratio: jaccard_index(&top_a, &top_b),
        original: top_a,
        erased: top_b,
        warning,
    })
}
