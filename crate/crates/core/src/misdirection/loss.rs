use super::target::MisdirectionTarget;
use crate::encoder::{HiddenTrace, SupervisionPoint};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Records `(1/T') sum_t ||h_t - c * target_t||^2` on `tape`, where `h` is the
/// supervised activation node. With `over_all_slots` every one of the `T`
/// rows counts; otherwise only the first `real_len` rows do.
pub fn record_hirm_loss(
    tape: &mut Tape,
    h: NodeId,
    target: &MisdirectionTarget,
    over_all_slots: bool,
    real_len: usize,
) -> Result<NodeId> {
    let h_shape = tape.value(h).shape().to_vec();
    if target.matrix.shape() != h_shape.as_slice() {
        return Err(Error::shape("hirm_loss", &h_shape, target.matrix.shape()));
    }
    let t = tape.leaf(target.matrix.clone())?;
    let ct = tape.scale(t, target.coefficient)?;
    if over_all_slots {
        tape.mse_token_loss(h, ct)
    } else {
        if real_len == 0 || real_len > h_shape[0] {
            return Err(Error::OutOfRange {
                what: "real_len",
                index: real_len,
                max: h_shape[0],
            });
        }
        let hs = tape.slice_rows(h, 0, real_len)?;
        let ts = tape.slice_rows(ct, 0, real_len)?;
        tape.mse_token_loss(hs, ts)
    }
}

/// Misdirection loss evaluated on a recorded trace.
pub fn hirm_loss(
    trace: &HiddenTrace,
    target: &MisdirectionTarget,
    supervision: SupervisionPoint,
    over_all_slots: bool,
    real_len: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.leaf(trace.hook(supervision)?.clone())?;
    let loss = record_hirm_loss(&mut tape, h, target, over_all_slots, real_len)?;
    Ok(tape.value(loss).clone())
}
