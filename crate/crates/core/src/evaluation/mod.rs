//! Leave-one-out ranking against sampled negatives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_eval_instance, sample_negatives, Batch, Dataset, EvalInstance, Split};
use crate::error::{Error, Result};
use crate::model::TemProxRec;
use crate::numerics::Scalar;

/// 1-based rank of `truth` among `candidates` (`(item, score)` pairs) under
/// descending score; equal scores rank the lower item index first.
pub fn rank_of_truth(candidates: &[(usize, f64)], truth: usize) -> Result<usize> {
    let t = candidates
        .iter()
        .find(|c| c.0 == truth)
        .ok_or_else(|| Error::Contract(format!("truth item {truth} missing from the candidates")))?
        .1;
    let ahead = candidates
        .iter()
        .filter(|&&(item, s)| item != truth && (s > t || (s == t && item < truth)))
        .count();
    Ok(ahead + 1)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub k: usize,
    pub num_neg: usize,
    pub seed: u64,
    /// Users scored per forward pass.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            k: 10,
            num_neg: 100,
            seed: 0,
            batch_size: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::Config("eval k and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub k: usize,
    pub num_neg: usize,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub num_users_evaluated: usize,
    pub num_skipped: usize,
    pub seed: u64,
}

/// One user's query and its candidate items (truth first).
#[derive(Clone, Debug)]
pub struct EvalQuery {
    pub instance: EvalInstance,
    pub candidates: Vec<usize>,
}

/// Builds every user's query. Negatives for user `u` come from a ChaCha
/// stream keyed by `(seed, u)`, so the draw does not depend on batching or
/// on which other users are present.
pub fn build_queries(dataset: &Dataset, seq_len: usize, cfg: &EvalConfig) -> (Vec<EvalQuery>, usize) {
    let mut out = Vec::with_capacity(dataset.num_users());
    let mut skipped = 0;
    for (u, events) in dataset.sequences.iter().enumerate() {
        let Some(instance) = make_eval_instance(u, events, seq_len, dataset.mask_token(), cfg.split) else {
            skipped += 1;
            continue;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u as u64);
        let history: Vec<usize> = events.iter().map(|e| e.item).collect();
        let mut candidates = vec![instance.target_item];
        candidates.extend(sample_negatives(&history, dataset.num_items(), cfg.num_neg, &mut rng));
        out.push(EvalQuery { instance, candidates });
    }
    (out, skipped)
}

/// Ranks every query with `score`, which maps a batch of query rows to one
/// full score row per query (indexed by item).
pub fn evaluate_with<F>(dataset: &Dataset, seq_len: usize, cfg: &EvalConfig, mut score: F) -> Result<EvalReport>
where
    F: FnMut(&Batch) -> Result<Vec<Vec<f64>>>,
{
    cfg.validate()?;
    let (queries, skipped) = build_queries(dataset, seq_len, cfg);
    let mut hr = 0.0;
    let mut ndcg = 0.0;
    for chunk in queries.chunks(cfg.batch_size) {
        let rows: Vec<_> = chunk.iter().map(|q| &q.instance.row).collect();
        let batch = Batch::from_rows(&rows);
        let scores = score(&batch)?;
        for (q, row) in chunk.iter().zip(&scores) {
            let cands: Vec<(usize, f64)> = q.candidates.iter().map(|&i| (i, row[i])).collect();
            let rank = rank_of_truth(&cands, q.instance.target_item)?;
            hr += hr_at_k(rank, cfg.k);
            ndcg += ndcg_at_k(rank, cfg.k);
        }
    }
    let n = queries.len();
    let denom = n.max(1) as f64;
    Ok(EvalReport {
        split: cfg.split,
        k: cfg.k,
        num_neg: cfg.num_neg,
        hr_at_k: hr / denom,
        ndcg_at_k: ndcg / denom,
        num_users_evaluated: n,
        num_skipped: skipped,
        seed: cfg.seed,
    })
}

/// Scores each user's MASK position with the model in eval mode.
pub fn evaluate<T: Scalar>(model: &TemProxRec<T>, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if model.vocab_rows() != dataset.vocab_rows() {
        return Err(Error::Config(format!(
            "model has {} item rows but the dataset needs {}",
            model.vocab_rows(),
            dataset.vocab_rows()
        )));
    }
    let n = model.config().max_len;
    evaluate_with(dataset, n, cfg, |batch| {
        let at: Vec<(usize, usize)> = (0..batch.batch_size).map(|b| (b, n - 1)).collect();
        let scores = model.rank_scores(batch, &at)?;
        Ok(scores
            .into_iter()
            .map(|row| row.into_iter().map(Scalar::as_f64).collect())
            .collect())
    })
}
