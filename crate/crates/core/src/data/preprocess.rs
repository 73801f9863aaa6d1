use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{day_index, Dataset, Event, Interaction, SECONDS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// One item-count pass followed by one user-count pass.
    #[default]
    SinglePass,
    /// Alternate both passes until nothing changes.
    FixedPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub min_user: usize,
    pub min_item: usize,
    /// Inclusive `[start, end]` restriction on raw timestamps (seconds).
    pub date_range: Option<[i64; 2]>,
    pub filter: FilterMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_user: 5,
            min_item: 5,
            date_range: None,
            filter: FilterMode::SinglePass,
        }
    }
}

fn item_pass(rows: Vec<&Interaction>, min_item: usize) -> Vec<&Interaction> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &rows {
        *counts.entry(r.item.as_str()).or_default() += 1;
    }
    rows.into_iter().filter(|r| counts[r.item.as_str()] >= min_item).collect()
}

fn user_pass(rows: Vec<&Interaction>, min_user: usize) -> Vec<&Interaction> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &rows {
        *counts.entry(r.user.as_str()).or_default() += 1;
    }
    rows.into_iter().filter(|r| counts[r.user.as_str()] >= min_user).collect()
}

/// Deduplicates, restricts to the date range, filters rare items then
/// light users, and remaps ids by first appearance.
pub fn preprocess(interactions: &[Interaction], cfg: &PreprocessConfig) -> Result<Dataset> {
    if cfg.min_user == 0 || cfg.min_item == 0 {
        return Err(Error::Config("min_user and min_item must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut rows: Vec<&Interaction> = interactions
        .iter()
        .filter(|r| match cfg.date_range {
            Some([start, end]) => r.timestamp >= start && r.timestamp <= end,
            None => true,
        })
        .filter(|r| seen.insert((r.user.as_str(), r.item.as_str(), r.timestamp)))
        .collect();

    loop {
        let before = rows.len();
        rows = item_pass(rows, cfg.min_item);
        rows = user_pass(rows, cfg.min_user);
        if cfg.filter == FilterMode::SinglePass || rows.len() == before {
            break;
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let origin_day = rows
        .iter()
        .map(|r| r.timestamp.div_euclid(SECONDS_PER_DAY))
        .min()
        .expect("non-empty");
    let last_day = rows
        .iter()
        .map(|r| r.timestamp.div_euclid(SECONDS_PER_DAY))
        .max()
        .expect("non-empty");

    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut sequences: Vec<Vec<Event>> = Vec::new();
    for r in &rows {
        let u = *user_index.entry(r.user.as_str()).or_insert_with(|| {
            user_ids.push(r.user.clone());
            sequences.push(Vec::new());
            user_ids.len() - 1
        });
        let i = *item_index.entry(r.item.as_str()).or_insert_with(|| {
            item_ids.push(r.item.clone());
            item_ids.len()
        });
        sequences[u].push(Event {
            item: i,
            day: day_index(r.timestamp, origin_day),
            timestamp: r.timestamp,
        });
    }
    // Stable: ties on the same day keep input order.
    for seq in &mut sequences {
        seq.sort_by_key(|e| e.day);
    }

    Ok(Dataset {
        user_ids,
        item_ids,
        sequences,
        origin_day,
        num_days: (last_day - origin_day + 1) as usize,
    })
}
