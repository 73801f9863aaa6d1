use rand::Rng;

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::model::TemProxRec;
use crate::numerics::{Scalar, Tape, Var};

/// A masked copy of a batch and the positions to reconstruct.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: Batch,
    /// `(row, position, true_item)`, in row-major order.
    pub targets: Vec<(usize, usize, usize)>,
}

impl MaskedBatch {
    /// Flat `row·n + position` indices of the targets.
    pub fn flat_positions(&self) -> Vec<usize> {
        self.targets.iter().map(|&(b, p, _)| b * self.batch.seq_len + p).collect()
    }

    pub fn target_items(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.2).collect()
    }
}

/// Replaces each real token by `mask_token` with probability `rho`; a row
/// that draws no mask gets one at a uniformly chosen real position.
pub fn apply_mlm_mask<R: Rng + ?Sized>(batch: &Batch, rho: f64, mask_token: usize, rng: &mut R) -> Result<MaskedBatch> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("mask proportion must lie in (0, 1], got {rho}")));
    }
    let n = batch.seq_len;
    let mut out = batch.clone();
    let mut targets = Vec::new();
    for b in 0..batch.batch_size {
        let real: Vec<usize> = (0..n).filter(|&p| batch.items[b * n + p] != PAD).collect();
        let mut picked: Vec<usize> = real.iter().copied().filter(|_| rng.gen_bool(rho)).collect();
        if picked.is_empty() && !real.is_empty() {
            picked.push(real[rng.gen_range(0..real.len())]);
        }
        for p in picked {
            targets.push((b, p, batch.items[b * n + p]));
            out.items[b * n + p] = mask_token;
        }
    }
    Ok(MaskedBatch { batch: out, targets })
}

/// Mean cross-entropy of the true items at the masked positions of
/// `hidden` (`[B·n × d]`). PAD and MASK take no probability mass.
pub fn mlm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TemProxRec<T>,
    vars: &[Var],
    hidden: Var,
    masked: &MaskedBatch,
) -> Result<Var> {
    let rows = tape.gather_rows(hidden, &masked.flat_positions())?;
    let logits = model.output_logits(tape, vars, rows)?;
    tape.cross_entropy(logits, &masked.target_items(), &model.excluded_columns())
}
