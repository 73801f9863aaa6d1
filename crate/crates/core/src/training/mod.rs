//! Optimizer, epoch loop, ablation wiring and the hyperparameter sweep.

mod adam;
mod sweep;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use sweep::{sweep, write_sweep_csv, SweepCell, SweepGrid, SweepRow};

use crate::data::{batches, training_rows, Dataset, SequenceRow, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport};
use crate::model::{HeadKind, ModelConfig, TemProxRec};
use crate::numerics::{Scalar, Tape};
use crate::objectives::{apply_mlm_mask, mlm_loss, pseudo_positive, tcl_loss, tcl_sample, total_loss, TclForm};

/// Cut-off of the validation metric used for early stopping.
pub const EARLY_STOP_K: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoTcl,
    NoAbsMhar,
    NoRelMhar,
    NoMhar,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoTcl,
        Ablation::NoAbsMhar,
        Ablation::NoRelMhar,
        Ablation::NoMhar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTcl => "no_tcl",
            Ablation::NoAbsMhar => "no_abs_mhar",
            Ablation::NoRelMhar => "no_rel_mhar",
            Ablation::NoMhar => "no_mhar",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected full|no_tcl|no_abs_mhar|no_rel_mhar|no_mhar)")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Mask proportion.
    pub rho: f64,
    /// Contrastive window radius in days.
    pub delta: i64,
    pub tau: f64,
    pub lambda: f64,
    pub ablation: Ablation,
    pub tcl_form: TclForm,
    /// Validate every this many epochs; 0 disables validation and early stopping.
    pub eval_every: usize,
    pub eval_num_neg: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 50,
            patience: 5,
            seed: 0,
            rho: 0.2,
            delta: 30,
            tau: 0.1,
            lambda: 0.3,
            ablation: Ablation::Full,
            tcl_form: TclForm::Standard,
            eval_every: 1,
            eval_num_neg: 100,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return fail("train.lr must be positive");
        }
        if self.patience < 1 {
            return fail("train.patience must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("train.adam_eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("train.weight_decay must be non-negative");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail("train.rho must lie in (0, 1]");
        }
        if self.delta < 0 {
            return fail("train.delta must be non-negative");
        }
        if !(self.tau > 0.0) {
            return fail("train.tau must be positive");
        }
        if !(self.lambda >= 0.0) {
            return fail("train.lambda must be non-negative");
        }
        if self.eval_batch_size == 0 {
            return fail("train.eval_batch_size must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validation(&self) -> EvalConfig {
        EvalConfig {
            split: Split::Validation,
            k: EARLY_STOP_K,
            num_neg: self.eval_num_neg,
            seed: self.seed,
            batch_size: self.eval_batch_size,
        }
    }
}

/// Model wiring and effective TCL weight for an ablation.
pub fn apply_ablation(model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, f64) {
    let mut m = model.clone();
    let mut lambda = train.lambda;
    match train.ablation {
        Ablation::Full => {}
        Ablation::NoTcl => lambda = 0.0,
        Ablation::NoAbsMhar => m.heads = vec![HeadKind::RelTime, HeadKind::RelPos],
        Ablation::NoRelMhar => m.heads = vec![HeadKind::AbsTime, HeadKind::AbsPos],
        Ablation::NoMhar => {
            m.heads = vec![HeadKind::Content; model.heads.len().max(1)];
            m.input_position = true;
        }
    }
    (m, lambda)
}

/// Mean losses over one epoch (weighted by rows per batch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub mlm_loss: f64,
    pub tcl_loss: f64,
    pub total: f64,
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mlm_loss: f64,
    pub tcl_loss: f64,
    pub total: f64,
    #[serde(rename = "val_HR@10")]
    pub val_hr: Option<f64>,
    #[serde(rename = "val_NDCG@10")]
    pub val_ndcg: Option<f64>,
}

/// One pass over `rows`: mask, forward, optional second forward for the
/// pseudo-positives, `MLM + λ·TCL`, backward, Adam. With `lambda == 0` the
/// contrastive branch is skipped entirely.
pub fn train_epoch<T: Scalar, R: Rng>(
    model: &mut TemProxRec<T>,
    adam: &mut AdamState<T>,
    rows: &[SequenceRow],
    cfg: &TrainConfig,
    lambda: f64,
    data_rng: &mut R,
    step_rng: &mut R,
) -> Result<EpochLosses> {
    let adam_cfg = cfg.adam();
    let mask_token = model.mask_token();
    let mut sums = EpochLosses::default();
    let mut seen = 0usize;
    for batch in batches(rows, cfg.batch_size, Some(data_rng)) {
        let masked = apply_mlm_mask(&batch, cfg.rho, mask_token, step_rng)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let fwd = model.forward(&mut tape, &vars, &masked.batch, true, step_rng)?;
        let mlm = mlm_loss(&mut tape, model, &vars, fwd.hidden, &masked)?;
        let (loss, tcl_value) = if lambda > 0.0 {
            let pseudo = pseudo_positive(&mut tape, model, &vars, &masked.batch, true, step_rng)?;
            let sets = tcl_sample(&masked.batch, mask_token, cfg.delta);
            let tcl = tcl_loss(&mut tape, fwd.hidden, pseudo, masked.batch.seq_len, &sets, cfg.tau, cfg.tcl_form)?;
            let value = tape.value(tcl.loss).item().as_f64();
            (total_loss(&mut tape, mlm, tcl.loss, lambda)?, value)
        } else {
            (mlm, 0.0)
        };
        tape.backward(loss)?;
        let w = batch.batch_size as f64;
        sums.mlm_loss += w * tape.value(mlm).item().as_f64();
        sums.tcl_loss += w * tcl_value;
        sums.total += w * tape.value(loss).item().as_f64();
        seen += batch.batch_size;

        let grads: Vec<Option<&[T]>> = vars.iter().map(|&v| tape.grad(v)).collect();
        let names = model.param_names().to_vec();
        adam_step(model.params_mut(), &names, &grads, adam, &adam_cfg)?;
    }
    let n = seen.max(1) as f64;
    Ok(EpochLosses {
        mlm_loss: sums.mlm_loss / n,
        tcl_loss: sums.tcl_loss / n,
        total: sums.total / n,
    })
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters at the best validation epoch (the last epoch when
    /// validation is disabled).
    pub model: TemProxRec<T>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_validation: Option<EvalReport>,
    /// Ablation-adjusted configuration actually trained.
    pub model_config: ModelConfig,
    pub lambda: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Fresh model for `dataset`, initialized from `cfg.seed`.
pub fn init_model<T: Scalar>(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset: &Dataset) -> Result<TemProxRec<T>> {
    let (m, _) = apply_ablation(model_cfg, cfg);
    TemProxRec::new(m, dataset.vocab_rows(), dataset.num_days, &mut stream(cfg.seed, 0))
}

/// Full training run with early stopping on validation NDCG@10. Each epoch
/// appends one JSON line to `log` when given.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (wired, lambda) = apply_ablation(model_cfg, cfg);
    wired.validate()?;
    let mut model: TemProxRec<T> = init_model(model_cfg, cfg, dataset)?;
    let rows = training_rows(dataset, wired.max_len);
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut adam = AdamState::new(model.params());
    let mut data_rng = stream(cfg.seed, 1);
    let mut step_rng = stream(cfg.seed, 2);
    let val_cfg = cfg.validation();

    let mut history = Vec::new();
    let mut best: Option<(usize, EvalReport, TemProxRec<T>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let losses = train_epoch(&mut model, &mut adam, &rows, cfg, lambda, &mut data_rng, &mut step_rng)?;
        let validate = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let report = if validate { Some(evaluate(&model, dataset, &val_cfg)?) } else { None };
        let stats = EpochStats {
            epoch,
            mlm_loss: losses.mlm_loss,
            tcl_loss: losses.tcl_loss,
            total: losses.total,
            val_hr: report.as_ref().map(|r| r.hr_at_k),
            val_ndcg: report.as_ref().map(|r| r.ndcg_at_k),
        };
        log::info!(
            "epoch {epoch}: total {:.4} (mlm {:.4}, tcl {:.4}) val ndcg {:?}",
            stats.total,
            stats.mlm_loss,
            stats.tcl_loss,
            stats.val_ndcg
        );
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &stats)?;
            writeln!(w)?;
        }
        history.push(stats);
        if let Some(report) = report {
            let improved = best.as_ref().map_or(true, |b| report.ndcg_at_k > b.1.ndcg_at_k);
            if improved {
                best = Some((epoch, report, model.clone()));
                since_best = 0;
            } else {
                since_best += cfg.eval_every.max(1);
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (best_epoch, best_validation, model) = match best {
        Some((e, r, m)) => (e, Some(r), m),
        None => (history.len(), None, model),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_validation,
        model_config: wired,
        lambda,
    })
}
