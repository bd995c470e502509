use std::collections::BTreeSet;

use super::loss::record_hirm_loss;
use super::target::MisdirectionTarget;
use crate::encoder::{record_forward, EncoderParams, SupervisionPoint, TextEncoder};
use crate::error::Result;
use crate::tensor::{finite_diff_check, CoordSample, GradCheckReport, ParamId, Tape, Tensor};

/// Everything that defines the scalar being differentiated.
#[derive(Clone, Debug)]
pub struct LossSpec<'a> {
    pub prompt: &'a str,
    pub target: &'a MisdirectionTarget,
    pub supervision: SupervisionPoint,
    pub over_all_slots: bool,
}

fn loss_value(params: &EncoderParams, encoder: &TextEncoder, spec: &LossSpec<'_>) -> Result<(Tape, crate::tensor::NodeId)> {
    let seq = encoder.tokenize(spec.prompt)?;
    let mut tape = Tape::new();
    let trace = record_forward(params, &seq, &mut tape)?;
    let h = trace.hook(spec.supervision)?;
    let loss = record_hirm_loss(&mut tape, h, spec.target, spec.over_all_slots, seq.real_len)?;
    Ok((tape, loss))
}

/// Checks tape gradients of the misdirection loss through the whole encoder
/// against central differences, for the parameters in `ids`.
pub fn encoder_gradcheck(
    encoder: &TextEncoder,
    spec: &LossSpec<'_>,
    ids: &BTreeSet<ParamId>,
    eps: f64,
    sample: CoordSample,
) -> Result<GradCheckReport> {
    let (mut tape, loss) = loss_value(&encoder.params, encoder, spec)?;
    let grads = tape.backward(loss, ids)?;
    let order: Vec<ParamId> = ids.iter().copied().collect();
    let values: Vec<Tensor> = order.iter().map(|&id| encoder.params.by_id(id).clone()).collect();
    let analytic: Vec<Tensor> = order
        .iter()
        .map(|&id| grads.get(id).cloned().expect("trainable id has a gradient entry"))
        .collect();
    let mut work = encoder.params.clone();
    finite_diff_check(
        |w| {
            for (&id, t) in order.iter().zip(w) {
                *work.by_id_mut(id) = t.clone();
            }
            let (tape, loss) = loss_value(&work, encoder, spec)?;
            tape.value(loss).item()
        },
        &values,
        &analytic,
        eps,
        sample,
    )
}
