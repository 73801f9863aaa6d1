//! Synthetic interaction logs with planted temporal structure.
//!
//! Two mechanisms pick each event's item:
//! * trends: during a trend's active window, with probability `p_trend`
//!   the item comes from that trend's small item pool, so users active in
//!   the same window share items;
//! * a first-order Markov chain over items, applied to the user's previous
//!   item, which gives each sequence its own within-user structure.
//!
//! Per-user gaps between events vary widely, so position alone does not
//! tell how far apart two events are.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{Interaction, SECONDS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub horizon_days: usize,
    pub num_trends: usize,
    /// Days each trend stays active.
    pub trend_window: usize,
    pub trend_pool_size: usize,
    /// Probability that an event inside an active trend draws from its pool.
    pub p_trend: f64,
    /// Probability that a non-trend event follows the Markov successor list.
    pub markov_sharpness: f64,
    pub markov_branching: usize,
    pub min_events: usize,
    pub max_events: usize,
    /// Range of per-user mean gaps between events, in days.
    pub gap_days: [f64; 2],
    /// Timestamp of day 0.
    pub start_timestamp: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            horizon_days: 365,
            num_trends: 12,
            trend_window: 30,
            trend_pool_size: 20,
            p_trend: 0.7,
            markov_sharpness: 0.8,
            markov_branching: 3,
            min_events: 10,
            max_events: 30,
            gap_days: [0.5, 12.0],
            // 2014-01-01T00:00:00Z
            start_timestamp: 1_388_534_400,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.p_trend) {
            return fail("p_trend must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.markov_sharpness) {
            return fail("markov_sharpness must lie in [0, 1]");
        }
        if self.horizon_days < self.trend_window || self.trend_window == 0 {
            return fail("need 1 <= trend_window <= horizon_days");
        }
        if self.num_items == 0 || self.num_users == 0 {
            return fail("num_items and num_users must be positive");
        }
        if self.trend_pool_size == 0 || self.trend_pool_size > self.num_items {
            return fail("trend_pool_size must lie in [1, num_items]");
        }
        if self.markov_branching == 0 || self.markov_branching > self.num_items {
            return fail("markov_branching must lie in [1, num_items]");
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return fail("need 1 <= min_events <= max_events");
        }
        if !(self.gap_days[0] > 0.0 && self.gap_days[0] <= self.gap_days[1]) {
            return fail("gap_days must be an increasing positive range");
        }
        if self.start_timestamp < 0 {
            return fail("start_timestamp must be non-negative");
        }
        Ok(())
    }
}

/// A trend episode: `pool` items are popular on days `start..start + len`.
#[derive(Clone, Debug)]
struct Trend {
    start: usize,
    len: usize,
    pool: Vec<usize>,
}

impl Trend {
    fn active(&self, day: usize) -> bool {
        day >= self.start && day < self.start + self.len
    }
}

fn layout_trends(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Trend> {
    let span = cfg.horizon_days - cfg.trend_window;
    (0..cfg.num_trends)
        .map(|k| {
            let start = if cfg.num_trends > 1 {
                k * span / (cfg.num_trends - 1)
            } else {
                0
            };
            let pool = sample(rng, cfg.num_items, cfg.trend_pool_size).into_vec();
            Trend {
                start,
                len: cfg.trend_window,
                pool,
            }
        })
        .collect()
}

/// Generates a log in the ingest CSV schema (items `i0..`, users `u0..`).
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Interaction>> {
    cfg.validate()?;
    // Independent streams: the world (trends, chain) and the users.
    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    world_rng.set_stream(1);
    let mut chain_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    chain_rng.set_stream(2);
    let mut user_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    user_rng.set_stream(3);

    let trends = layout_trends(cfg, &mut world_rng);
    let successors: Vec<Vec<usize>> = (0..cfg.num_items)
        .map(|_| sample(&mut chain_rng, cfg.num_items, cfg.markov_branching).into_vec())
        .collect();

    let mut out = Vec::new();
    let mut active = Vec::with_capacity(trends.len());
    for u in 0..cfg.num_users {
        let count = user_rng.gen_range(cfg.min_events..=cfg.max_events);
        let mean_gap = user_rng.gen_range(cfg.gap_days[0]..=cfg.gap_days[1]);
        let gaps = Exp::new(1.0 / mean_gap).expect("positive rate");
        let expected_span = (count as f64 * mean_gap) as usize;
        let latest_start = cfg.horizon_days.saturating_sub(expected_span).max(1);
        let mut day = user_rng.gen_range(0..latest_start);
        let mut prev: Option<usize> = None;
        for k in 0..count {
            if k > 0 {
                day += gaps.sample(&mut user_rng).floor() as usize;
            }
            if day >= cfg.horizon_days {
                break;
            }
            active.clear();
            active.extend(trends.iter().filter(|t| t.active(day)));
            let roll: f64 = user_rng.gen();
            let item = if roll < cfg.p_trend && !active.is_empty() {
                let trend = active[user_rng.gen_range(0..active.len())];
                trend.pool[user_rng.gen_range(0..trend.pool.len())]
            } else {
                match prev {
                    Some(p) if user_rng.gen::<f64>() < cfg.markov_sharpness => {
                        successors[p][user_rng.gen_range(0..successors[p].len())]
                    }
                    _ => user_rng.gen_range(0..cfg.num_items),
                }
            };
            let second = user_rng.gen_range(0..SECONDS_PER_DAY);
            out.push(Interaction::new(
                format!("u{u}"),
                format!("i{item}"),
                cfg.start_timestamp + day as i64 * SECONDS_PER_DAY + second,
            ));
            prev = Some(item);
        }
    }
    Ok(out)
}
