use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::model::TemProxRec;
use crate::numerics::{CustomOp, Scalar, Tape, Tensor, Var};

/// Where a representation lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RepRef {
    /// Flat `row·n + position` index into the main pass hidden states.
    Main(usize),
    /// Anchor row of the second (pseudo-positive) pass.
    Pseudo(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub row: usize,
    pub position: usize,
    pub day: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastSet {
    pub anchor: Anchor,
    pub positives: Vec<RepRef>,
    pub negatives: Vec<RepRef>,
}

/// Denominator of the per-positive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TclForm {
    /// `exp(s_p/τ) / (exp(s_p/τ) + Σ_n exp(s_n/τ))`.
    #[default]
    Standard,
    /// `exp(s_p/τ) / Σ_n exp(s_n/τ)`; an anchor without negatives adds 0.
    NegativesOnly,
}

/// Last real position of row `b`, if any.
pub fn anchor_position(batch: &Batch, b: usize) -> Option<usize> {
    batch.row_items(b).iter().rposition(|&i| i != PAD)
}

/// One contrast set per row with a real token. Candidates are the real,
/// unmasked positions of every other row; a candidate is positive when its
/// day is within `delta` of the anchor's (inclusive). The pseudo-positive
/// of the anchor's row is appended to the positives.
pub fn tcl_sample(batch: &Batch, mask_token: usize, delta: i64) -> Vec<ContrastSet> {
    let n = batch.seq_len;
    let mut sets = Vec::with_capacity(batch.batch_size);
    for b in 0..batch.batch_size {
        let Some(position) = anchor_position(batch, b) else {
            continue;
        };
        let day = batch.days[b * n + position];
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for other in (0..batch.batch_size).filter(|&o| o != b) {
            for p in 0..n {
                let flat = other * n + p;
                let item = batch.items[flat];
                if item == PAD || item == mask_token {
                    continue;
                }
                if (batch.days[flat] - day).abs() <= delta {
                    positives.push(RepRef::Main(flat));
                } else {
                    negatives.push(RepRef::Main(flat));
                }
            }
        }
        positives.push(RepRef::Pseudo(b));
        sets.push(ContrastSet {
            anchor: Anchor { row: b, position, day },
            positives,
            negatives,
        });
    }
    sets
}

/// Anchor-position representations `[B×d]` from a second stochastic pass
/// over the same (masked) batch. Row `b` is row `b`'s anchor; rows without
/// a real token use the last position.
pub fn pseudo_positive<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &TemProxRec<T>,
    vars: &[Var],
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !training {
        return Err(Error::Contract(
            "pseudo-positive needs dropout active; in eval mode both passes coincide".into(),
        ));
    }
    let fwd = model.forward(tape, vars, batch, true, rng)?;
    let n = batch.seq_len;
    let rows: Vec<usize> = (0..batch.batch_size)
        .map(|b| b * n + anchor_position(batch, b).unwrap_or(n - 1))
        .collect();
    tape.gather_rows(fwd.hidden, &rows)
}

pub struct TclOutput {
    pub loss: Var,
    /// Similarities that involved a zero-norm representation (set to 0).
    pub zero_norm: usize,
}

/// Contrastive loss over `sets`: per anchor, the mean over positives of
/// `−log(exp(s_p/τ) / denominator)`, then the mean over anchors. `s` is
/// cosine similarity; `main` is `[B·n × d]`, `pseudo` is `[B × d]`.
pub fn tcl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    main: Var,
    pseudo: Var,
    seq_len: usize,
    sets: &[ContrastSet],
    tau: f64,
    form: TclForm,
) -> Result<TclOutput> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let d = tape.value(main).last_dim();
    if tape.value(pseudo).last_dim() != d {
        return Err(Error::Dimension {
            op: "tcl_loss",
            left: tape.shape(main).to_vec(),
            right: tape.shape(pseudo).to_vec(),
        });
    }
    for set in sets {
        if set.positives.is_empty() {
            return Err(Error::Contract(format!("anchor row {} has no positives", set.anchor.row)));
        }
    }
    let op = TclOp {
        sets: sets.to_vec(),
        anchors: sets.iter().map(|s| s.anchor.row * seq_len + s.anchor.position).collect(),
        tau: T::lit(tau),
        form,
    };
    let (loss, zero_norm) = op.evaluate(tape.value(main), tape.value(pseudo), None);
    if zero_norm > 0 {
        log::warn!("{zero_norm} contrastive similarities involved a zero-norm representation");
    }
    let loss = tape.custom(&[main, pseudo], Tensor::scalar(loss), Box::new(op));
    Ok(TclOutput { loss, zero_norm })
}

struct TclOp<T> {
    sets: Vec<ContrastSet>,
    anchors: Vec<usize>,
    tau: T,
    form: TclForm,
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

impl<T: Scalar> TclOp<T> {
    /// Loss value and zero-norm count; with `grads`, also accumulates
    /// `scale·∂loss/∂input` into `grads[0]` (main) and `grads[1]` (pseudo).
    fn evaluate(&self, main: &Tensor<T>, pseudo: &Tensor<T>, mut grads: Option<(&mut [Vec<T>], T)>) -> (T, usize) {
        let d = main.last_dim();
        let vec_of = |r: RepRef| match r {
            RepRef::Main(i) => main.row(i),
            RepRef::Pseudo(i) => pseudo.row(i),
        };
        if self.sets.is_empty() {
            return (T::zero(), 0);
        }
        let main_norms: Vec<T> = (0..main.outer()).map(|i| norm(main.row(i))).collect();
        let pseudo_norms: Vec<T> = (0..pseudo.outer()).map(|i| norm(pseudo.row(i))).collect();
        let norm_of = |r: RepRef| match r {
            RepRef::Main(i) => main_norms[i],
            RepRef::Pseudo(i) => pseudo_norms[i],
        };
        let inv_anchors = T::one() / T::from_usize(self.sets.len()).expect("count");
        let tau = self.tau;
        let mut total = T::zero();
        let mut zero_norm = 0;
        for (set, &anchor) in self.sets.iter().zip(&self.anchors) {
            let a = main.row(anchor);
            let na = main_norms[anchor];
            let cos = |r: RepRef, zero_norm: &mut usize| -> T {
                let nx = norm_of(r);
                if na == T::zero() || nx == T::zero() {
                    *zero_norm += 1;
                    return T::zero();
                }
                let dot: T = a.iter().zip(vec_of(r)).map(|(&p, &q)| p * q).sum();
                dot / (na * nx)
            };
            let pos: Vec<T> = set.positives.iter().map(|&r| cos(r, &mut zero_norm)).collect();
            let neg: Vec<T> = set.negatives.iter().map(|&r| cos(r, &mut zero_norm)).collect();
            let inv_pos = T::one() / T::from_usize(pos.len()).expect("count");

            // Both forms depend on the negatives only through
            // lse = log Σ_n exp(s_n/τ), and on lse only via its softmax.
            let mut g_pos = vec![T::zero(); pos.len()];
            let mut g_neg = vec![T::zero(); neg.len()];
            let mut anchor_loss = T::zero();
            if !neg.is_empty() {
                let neg_max = neg.iter().map(|&s| s / tau).fold(T::neg_infinity(), T::max);
                let lse = neg_max + neg.iter().map(|&s| (s / tau - neg_max).exp()).sum::<T>().ln();
                // Σ_k ∂loss_k/∂lse
                let mut pull = T::zero();
                for (k, &sp) in pos.iter().enumerate() {
                    let x = lse - sp / tau;
                    match self.form {
                        TclForm::Standard => {
                            // softplus(x) = −log(e^{s_p/τ} / (e^{s_p/τ} + e^{lse}))
                            anchor_loss += if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
                            let sig = T::one() / (T::one() + (-x).exp());
                            g_pos[k] = -sig / tau;
                            pull += sig;
                        }
                        TclForm::NegativesOnly => {
                            anchor_loss += x;
                            g_pos[k] = -T::one() / tau;
                            pull += T::one();
                        }
                    }
                }
                for (j, &sn) in neg.iter().enumerate() {
                    g_neg[j] = pull * (sn / tau - lse).exp() / tau;
                }
            }
            total += anchor_loss * inv_pos * inv_anchors;

            if let Some((grads, scale)) = grads.as_mut() {
                if na == T::zero() {
                    continue;
                }
                let coef = *scale * inv_pos * inv_anchors;
                let inv_na2 = T::one() / (na * na);
                // ∂s/∂a = x/(|a||x|) − s·a/|a|²,  ∂s/∂x = a/(|a||x|) − s·x/|x|²
                let mut ga = vec![T::zero(); d];
                let mut a_coef = T::zero();
                let refs = set.positives.iter().zip(&pos).zip(&g_pos);
                let refs = refs.chain(set.negatives.iter().zip(&neg).zip(&g_neg));
                for ((&r, &s), &g) in refs {
                    let nx = norm_of(r);
                    if g == T::zero() || nx == T::zero() {
                        continue;
                    }
                    let x = vec_of(r);
                    let g = g * coef;
                    let gi = g / (na * nx);
                    for (acc, &xc) in ga.iter_mut().zip(x) {
                        *acc += gi * xc;
                    }
                    a_coef += g * s;
                    let (slot, row) = match r {
                        RepRef::Main(i) => (0, i),
                        RepRef::Pseudo(i) => (1, i),
                    };
                    let gx = g * s / (nx * nx);
                    for (c, out) in grads[slot][row * d..(row + 1) * d].iter_mut().enumerate() {
                        *out += gi * a[c] - gx * x[c];
                    }
                }
                for (c, out) in grads[0][anchor * d..(anchor + 1) * d].iter_mut().enumerate() {
                    *out += ga[c] - a_coef * inv_na2 * a[c];
                }
            }
        }
        (total, zero_norm)
    }
}

impl<T: Scalar> CustomOp<T> for TclOp<T> {
    fn name(&self) -> &'static str {
        "tcl_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out_grad: &[T], grads: &mut [Vec<T>]) {
        self.evaluate(inputs[0], inputs[1], Some((grads, out_grad[0])));
    }
}

/// `L = L_MLM + λ·L_TCL`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, mlm: Var, tcl: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = tape.scale(tcl, T::lit(lambda));
    tape.add(mlm, weighted)
}
