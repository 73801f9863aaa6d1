use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig};
use crate::model::ModelConfig;
use crate::numerics::Scalar;

/// Axes of the grid. An empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub delta: Vec<i64>,
    pub kt: Vec<usize>,
    pub lambda: Vec<f64>,
    pub hidden: Vec<usize>,
    pub lr: Vec<f64>,
    pub dropout: Vec<f64>,
    /// Seeds per cell; empty means the base seed only.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub delta: i64,
    pub kt: usize,
    pub lambda: f64,
    pub hidden: usize,
    pub lr: f64,
    pub dropout: f64,
}

impl SweepCell {
    fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        t.delta = self.delta;
        m.kt = self.kt;
        t.lambda = self.lambda;
        m.hidden = self.hidden;
        t.lr = self.lr;
        m.dropout = self.dropout;
        (m, t)
    }
}

/// Seed-averaged result for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub cell: SweepCell,
    pub seeds: usize,
    pub val_hr: f64,
    pub val_ndcg: f64,
    pub test_hr: f64,
    pub test_ndcg: f64,
}

fn axis<V: Copy>(values: &[V], base: V) -> Vec<V> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    pub fn cells(&self, model: &ModelConfig, train: &TrainConfig) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &delta in &axis(&self.delta, train.delta) {
            for &kt in &axis(&self.kt, model.kt) {
                for &lambda in &axis(&self.lambda, train.lambda) {
                    for &hidden in &axis(&self.hidden, model.hidden) {
                        for &lr in &axis(&self.lr, train.lr) {
                            for &dropout in &axis(&self.dropout, model.dropout) {
                                out.push(SweepCell {
                                    delta,
                                    kt,
                                    lambda,
                                    hidden,
                                    lr,
                                    dropout,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn seeds(&self, train: &TrainConfig) -> Vec<u64> {
        axis(&self.seeds, train.seed)
    }
}

/// Trains every (cell, seed) pair in parallel and reports the best-epoch
/// validation and test metrics at `eval.k`, averaged over seeds. Rows come
/// back in grid order.
pub fn sweep<T: Scalar + Send + Sync>(
    dataset: &Dataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: &SweepGrid,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(model, train_cfg);
    let seeds = grid.seeds(train_cfg);
    for cell in &cells {
        let (m, t) = cell.apply(model, train_cfg);
        m.validate()?;
        t.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<Result<[f64; 4]>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (m, mut t) = cells[c].apply(model, train_cfg);
            t.seed = seed;
            let outcome = train::<T>(dataset, &m, &t, None)?;
            let val = evaluate(&outcome.model, dataset, &EvalConfig { split: Split::Validation, ..eval.clone() })?;
            let test = evaluate(&outcome.model, dataset, &EvalConfig { split: Split::Test, ..eval.clone() })?;
            Ok([val.hr_at_k, val.ndcg_at_k, test.hr_at_k, test.ndcg_at_k])
        })
        .collect();
    let mut sums = vec![[0.0; 4]; cells.len()];
    for (&(c, _), r) in jobs.iter().zip(results) {
        let r = r?;
        for k in 0..4 {
            sums[c][k] += r[k];
        }
    }
    let n = seeds.len() as f64;
    Ok(cells
        .into_iter()
        .zip(sums)
        .map(|(cell, s)| SweepRow {
            cell,
            seeds: seeds.len(),
            val_hr: s[0] / n,
            val_ndcg: s[1] / n,
            test_hr: s[2] / n,
            test_ndcg: s[3] / n,
        })
        .collect())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["delta", "kt", "lambda", "hidden", "lr", "dropout", "seeds", "val_hr", "val_ndcg", "test_hr", "test_ndcg"])?;
    for r in rows {
        let c = &r.cell;
        w.write_record([
            c.delta.to_string(),
            c.kt.to_string(),
            c.lambda.to_string(),
            c.hidden.to_string(),
            c.lr.to_string(),
            c.dropout.to_string(),
            r.seeds.to_string(),
            r.val_hr.to_string(),
            r.val_ndcg.to_string(),
            r.test_hr.to_string(),
            r.test_ndcg.to_string(),
        ])?;
    }
    w.flush().map_err(Error::from)
}
