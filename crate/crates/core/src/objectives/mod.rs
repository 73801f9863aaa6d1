//! Training objectives: masked-item reconstruction and the temporal
//! contrastive loss.

mod mlm;
mod tcl;

pub use mlm::{apply_mlm_mask, mlm_loss, MaskedBatch};
pub use tcl::{
    anchor_position, pseudo_positive, tcl_loss, tcl_sample, total_loss, Anchor, ContrastSet, RepRef, TclForm,
    TclOutput,
};
