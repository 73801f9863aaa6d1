use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Event, PAD};

/// One user's fixed-length, left-padded item/day row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRow {
    pub user: usize,
    pub items: Vec<usize>,
    pub days: Vec<i64>,
}

impl SequenceRow {
    /// Keeps the `n` most recent events, right-aligned behind PAD tokens.
    pub fn right_aligned(user: usize, events: &[Event], n: usize) -> Self {
        let tail = &events[events.len().saturating_sub(n)..];
        let pad = n - tail.len();
        let mut items = vec![PAD; pad];
        let mut days = vec![0; pad];
        items.extend(tail.iter().map(|e| e.item));
        days.extend(tail.iter().map(|e| e.day));
        Self { user, items, days }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Fixed-length padded rows for every user's full sequence.
pub fn build_sequences(dataset: &Dataset, n: usize) -> Vec<SequenceRow> {
    assert!(n >= 2, "sequence length must be at least 2");
    dataset
        .sequences
        .iter()
        .enumerate()
        .map(|(u, seq)| SequenceRow::right_aligned(u, seq, n))
        .collect()
}

/// Training rows: each sequence without its validation and test events.
/// Users left with no training events are skipped.
pub fn training_rows(dataset: &Dataset, n: usize) -> Vec<SequenceRow> {
    dataset
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, seq)| seq.len() > 2)
        .map(|(u, seq)| SequenceRow::right_aligned(u, &seq[..seq.len() - 2], n))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validation" | "valid" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (expected validation|test)")),
        }
    }
}

/// Leave-one-out query: the context ends in MASK carrying the target's day.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalInstance {
    pub row: SequenceRow,
    pub target_item: usize,
    pub target_day: i64,
}

/// Builds the held-out query for `split`, or `None` when the user has fewer
/// than three events.
pub fn make_eval_instance(user: usize, events: &[Event], n: usize, mask_token: usize, split: Split) -> Option<EvalInstance> {
    if events.len() < 3 {
        return None;
    }
    let target_at = match split {
        Split::Test => events.len() - 1,
        Split::Validation => events.len() - 2,
    };
    let target = events[target_at];
    let mut row = SequenceRow::right_aligned(user, &events[..target_at], n - 1);
    row.items.push(mask_token);
    row.days.push(target.day);
    Some(EvalInstance {
        row,
        target_item: target.item,
        target_day: target.day,
    })
}

/// Uniform sample without replacement of up to `count` items in
/// `1..=num_items` that are absent from `history`.
pub fn sample_negatives<R: Rng + ?Sized>(history: &[usize], num_items: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let seen: HashSet<usize> = history.iter().copied().collect();
    let pool: Vec<usize> = (1..=num_items).filter(|i| !seen.contains(i)).collect();
    if pool.len() <= count {
        return pool;
    }
    rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|k| pool[k])
        .collect()
}

/// A stack of rows ready for the model. All matrices are row-major `[B×n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub days: Vec<i64>,
    /// `1..=n` for every row, independent of padding.
    pub positions: Vec<usize>,
    /// `true` for real (non-PAD) tokens.
    pub pad_mask: Vec<bool>,
}

impl Batch {
    pub fn from_rows(rows: &[&SequenceRow]) -> Self {
        let n = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == n), "rows must share one length");
        let mut items = Vec::with_capacity(rows.len() * n);
        let mut days = Vec::with_capacity(rows.len() * n);
        for r in rows {
            items.extend_from_slice(&r.items);
            for (&it, &d) in r.items.iter().zip(&r.days) {
                days.push(if it == PAD { 0 } else { d });
            }
        }
        let pad_mask = items.iter().map(|&i| i != PAD).collect();
        Self {
            batch_size: rows.len(),
            seq_len: n,
            users: rows.iter().map(|r| r.user).collect(),
            items,
            days,
            positions: (0..rows.len()).flat_map(|_| 1..=n).collect(),
            pad_mask,
        }
    }

    pub fn row_items(&self, b: usize) -> &[usize] {
        &self.items[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn row_days(&self, b: usize) -> &[i64] {
        &self.days[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.pad_mask[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Same batch with every day shifted by `offset` (PAD days included).
    pub fn shift_days(&self, offset: i64) -> Self {
        let mut out = self.clone();
        out.days.iter_mut().for_each(|d| *d += offset);
        out
    }
}

/// Splits rows into batches, shuffling first when `rng` is given.
pub fn batches<R: Rng + ?Sized>(rows: &[SequenceRow], batch_size: usize, rng: Option<&mut R>) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&SequenceRow> = chunk.iter().map(|&i| &rows[i]).collect();
            Batch::from_rows(&refs)
        })
        .collect()
}
