//! Temporal statistics of interaction logs: gaps between consecutive
//! interactions and how often a user's items are shared by others nearby
//! in time.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Day gaps between consecutive interactions of each user. Zero gaps are
/// counted apart from the histogram.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalHistogram {
    /// Positive interval (days) to count.
    pub counts: BTreeMap<i64, usize>,
    pub zero_count: usize,
}

impl IntervalHistogram {
    /// All intervals, zero bucket included.
    pub fn total(&self) -> usize {
        self.zero_count + self.counts.values().sum::<usize>()
    }
}

pub fn interval_distribution(dataset: &Dataset) -> IntervalHistogram {
    let mut out = IntervalHistogram::default();
    for seq in &dataset.sequences {
        for pair in seq.windows(2) {
            let gap = pair[1].day - pair[0].day;
            if gap == 0 {
                out.zero_count += 1;
            } else {
                *out.counts.entry(gap).or_default() += 1;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapConfig {
    /// Window radius in days (inclusive).
    pub delta: i64,
    /// Number of most active users averaged.
    pub top_u: usize,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self { delta: 30, top_u: 100 }
    }
}

impl OverlapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 0 {
            return Err(Error::Config("overlap.delta must be non-negative".into()));
        }
        if self.top_u == 0 {
            return Err(Error::Config("overlap.top_u must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per item, every `(day, user)` interaction sorted by day.
pub struct OverlapIndex<'a> {
    dataset: &'a Dataset,
    by_item: Vec<Vec<(i64, usize)>>,
}

impl<'a> OverlapIndex<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        let mut by_item = vec![Vec::new(); dataset.num_items() + 1];
        for (u, seq) in dataset.sequences.iter().enumerate() {
            for e in seq {
                by_item[e.item].push((e.day, u));
            }
        }
        for list in &mut by_item {
            list.sort_unstable();
        }
        Self { dataset, by_item }
    }

    fn shared(&self, item: usize, day: i64, user: usize, delta: i64) -> bool {
        let list = &self.by_item[item];
        let lo = list.partition_point(|&(d, _)| d < day - delta);
        list[lo..].iter().take_while(|&&(d, _)| d <= day + delta).any(|&(_, v)| v != user)
    }

    /// Fraction of user `u`'s interactions whose item some other user also
    /// took within `delta` days. Repeated items count once per interaction.
    pub fn ratio(&self, u: usize, delta: i64) -> Result<f64> {
        let seq = self
            .dataset
            .sequences
            .get(u)
            .ok_or_else(|| Error::UnknownUser(format!("#{u}")))?;
        if seq.is_empty() {
            return Err(Error::Contract(format!("user #{u} has no interactions")));
        }
        let hits = seq.iter().filter(|e| self.shared(e.item, e.day, u, delta)).count();
        Ok(hits as f64 / seq.len() as f64)
    }
}

/// Overlap ratio of the user with external id `user`.
pub fn overlap_ratio(dataset: &Dataset, user: &str, delta: i64) -> Result<f64> {
    let u = dataset.user_index(user).ok_or_else(|| Error::UnknownUser(user.to_string()))?;
    OverlapIndex::new(dataset).ratio(u, delta)
}

/// Indices of the `top_u` most active users; ties go to the lower index.
pub fn top_users(dataset: &Dataset, top_u: usize) -> Vec<usize> {
    let mut users: Vec<usize> = (0..dataset.num_users()).collect();
    users.sort_by(|&a, &b| dataset.sequences[b].len().cmp(&dataset.sequences[a].len()).then(a.cmp(&b)));
    users.truncate(top_u);
    users
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub delta: i64,
    pub top_u: usize,
    /// `(external user id, ratio)` in activity order.
    pub users: Vec<(String, f64)>,
    pub average: f64,
}

pub fn overlap_report(dataset: &Dataset, cfg: &OverlapConfig) -> Result<OverlapReport> {
    cfg.validate()?;
    if dataset.num_users() == 0 {
        return Err(Error::EmptyDataset);
    }
    let index = OverlapIndex::new(dataset);
    let top = top_users(dataset, cfg.top_u);
    let ratios: Vec<f64> = top
        .par_iter()
        .map(|&u| index.ratio(u, cfg.delta))
        .collect::<Result<_>>()?;
    let average = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(OverlapReport {
        delta: cfg.delta,
        top_u: cfg.top_u,
        users: top.iter().map(|&u| dataset.user_ids[u].clone()).zip(ratios).collect(),
        average,
    })
}

/// Mean overlap ratio over the most active users.
pub fn average_overlap(dataset: &Dataset, cfg: &OverlapConfig) -> Result<f64> {
    overlap_report(dataset, cfg).map(|r| r.average)
}

pub fn write_interval_csv(path: &Path, hist: &IntervalHistogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["interval_days", "count"])?;
    for (gap, count) in &hist.counts {
        w.write_record([gap.to_string(), count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_overlap_csv(path: &Path, report: &OverlapReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user", "ratio"])?;
    for (user, ratio) in &report.users {
        w.write_record([user.clone(), ratio.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
