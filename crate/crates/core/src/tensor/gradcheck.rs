//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeSet;

use super::{NodeId, ParamId, Tape, Tensor};
use crate::error::{Error, Result};

/// Which coordinates of each parameter tensor get perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordSample {
    All,
    /// At most this many coordinates per tensor, evenly strided.
    AtMost(usize),
}

impl CoordSample {
    fn indices(self, numel: usize) -> Vec<usize> {
        match self {
            CoordSample::All => (0..numel).collect(),
            CoordSample::AtMost(n) if n >= numel => (0..numel).collect(),
            CoordSample::AtMost(0) => Vec::new(),
            CoordSample::AtMost(n) => (0..n).map(|i| i * numel / n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `eps` must lie in `[1e-8, 1e-4]`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    sample: CoordSample,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference eps {eps:e} outside [1e-8, 1e-4]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape("finite_diff_check", &[params.len()], &[analytic.len()]));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut eval = |w: &[Tensor]| -> Result<f64> {
        let v = f(w)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference evaluation".into(),
            });
        }
        Ok(v)
    };
    for (ti, (p, g)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("finite_diff_check", p.shape(), g.shape()));
        }
        for ci in sample.indices(p.numel()) {
            let orig = p.data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (g.data()[ci] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}

/// Records `build` on a tape with every tensor in `params` trainable,
/// backpropagates, and checks all coordinates against finite differences.
pub fn check_tape_gradients<B>(build: B, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let record = |values: &[Tensor]| -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(ParamId(i), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok((tape, loss))
    };
    let (mut tape, loss) = record(params)?;
    let trainable: BTreeSet<ParamId> = (0..params.len()).map(ParamId).collect();
    let grads = tape.backward(loss, &trainable)?;
    let analytic: Vec<Tensor> = (0..params.len())
        .map(|i| grads.get(ParamId(i)).cloned().expect("trainable entry"))
        .collect();
    finite_diff_check(
        |w| {
            let (tape, loss) = record(w)?;
            tape.value(loss).item()
        },
        params,
        &analytic,
        eps,
        CoordSample::All,
    )
}
