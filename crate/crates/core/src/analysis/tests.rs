use std::collections::HashMap;

use proptest::prelude::*;

use super::*;
use crate::data::{preprocess, synth_generate, Event, PreprocessConfig, SynthConfig};

fn dataset(seqs: &[Vec<(usize, i64)>]) -> Dataset {
    let num_items = seqs.iter().flatten().map(|e| e.0).max().unwrap_or(0);
    let num_days = seqs.iter().flatten().map(|e| e.1).max().unwrap_or(0) as usize + 1;
    Dataset {
        user_ids: (0..seqs.len()).map(|u| format!("u{u}")).collect(),
        item_ids: (1..=num_items).map(|i| format!("i{i}")).collect(),
        sequences: seqs
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&(item, day)| Event {
                        item,
                        day,
                        timestamp: day * 86_400,
                    })
                    .collect()
            })
            .collect(),
        origin_day: 0,
        num_days,
    }
}

fn brute_intervals(ds: &Dataset) -> (HashMap<i64, usize>, usize) {
    let mut counts = HashMap::new();
    let mut zero = 0;
    for seq in &ds.sequences {
        for i in 1..seq.len() {
            match seq[i].day - seq[i - 1].day {
                0 => zero += 1,
                g => *counts.entry(g).or_insert(0) += 1,
            }
        }
    }
    (counts, zero)
}

fn brute_ratio(ds: &Dataset, u: usize, delta: i64) -> f64 {
    let seq = &ds.sequences[u];
    let mut hits = 0;
    for e in seq {
        let mut found = false;
        for (v, other) in ds.sequences.iter().enumerate() {
            for o in other {
                if v != u && o.item == e.item && (o.day - e.day).abs() <= delta {
                    found = true;
                }
            }
        }
        hits += found as usize;
    }
    hits as f64 / seq.len() as f64
}

#[test]
fn interval_examples() {
    let ds = dataset(&[vec![(1, 0), (2, 3), (3, 10)], vec![(4, 5)], vec![(1, 2), (2, 2), (5, 4)]]);
    let h = interval_distribution(&ds);
    assert_eq!(h.counts, BTreeMap::from([(2, 1), (3, 1), (7, 1)]));
    assert_eq!(h.zero_count, 1);
    assert_eq!(h.total(), 4);
}

#[test]
fn handcrafted_intervals_match_enumeration() {
    let ds = dataset(&[
        vec![(1, 0), (2, 0), (3, 1), (1, 4), (2, 4)],
        vec![(3, 2), (4, 9), (5, 9), (1, 30)],
        vec![(2, 7)],
        vec![(5, 1), (4, 2), (3, 3), (2, 4), (1, 5)],
    ]);
    let h = interval_distribution(&ds);
    let (counts, zero) = brute_intervals(&ds);
    assert_eq!(h.counts, counts.into_iter().collect::<BTreeMap<_, _>>());
    assert_eq!(h.zero_count, zero);
    assert_eq!((h.counts[&1], h.zero_count), (5, 3));
}

#[test]
fn overlap_examples() {
    let ds = dataset(&[vec![(1, 0), (2, 10)], vec![(1, 5), (3, 12)]]);
    assert_eq!(overlap_ratio(&ds, "u0", 30).unwrap(), 0.5);
    assert_eq!(overlap_ratio(&ds, "u0", 5).unwrap(), 0.5);
    assert_eq!(overlap_ratio(&ds, "u0", 4).unwrap(), 0.0);
    assert!(matches!(overlap_ratio(&ds, "nobody", 30), Err(Error::UnknownUser(_))));

    let alone = dataset(&[vec![(1, 0), (1, 1), (2, 3)]]);
    assert_eq!(overlap_ratio(&alone, "u0", 1000).unwrap(), 0.0);

    // Every item of u0 shared somewhere, window spanning the horizon.
    let shared = dataset(&[vec![(1, 0), (2, 50), (1, 90)], vec![(2, 0)], vec![(1, 99)]]);
    assert_eq!(overlap_ratio(&shared, "u0", 100).unwrap(), 1.0);
    // Repeats are judged per interaction.
    assert_eq!(overlap_ratio(&shared, "u0", 10).unwrap(), 1.0 / 3.0);
}

#[test]
fn top_users_break_ties_by_index() {
    let ds = dataset(&[vec![(1, 0)], vec![(1, 0), (2, 1)], vec![(2, 3), (3, 4)], vec![(1, 9), (2, 9), (3, 9)]]);
    assert_eq!(top_users(&ds, 3), vec![3, 1, 2]);
    let cfg = OverlapConfig { delta: 2, top_u: 1 };
    let r = overlap_report(&ds, &cfg).unwrap();
    assert_eq!(r.users[0].0, "u3");
    assert_eq!(r.average, OverlapIndex::new(&ds).ratio(3, 2).unwrap());
    assert!(OverlapConfig { top_u: 0, ..cfg }.validate().is_err());
    assert!(OverlapConfig { delta: -1, ..cfg }.validate().is_err());
}

#[test]
fn planted_trends_are_mostly_shared() {
    let cfg = SynthConfig {
        num_users: 300,
        num_items: 200,
        p_trend: 1.0,
        seed: 3,
        ..Default::default()
    };
    let ds = preprocess(&synth_generate(&cfg).unwrap(), &PreprocessConfig::default()).unwrap();
    let planted = average_overlap(&ds, &OverlapConfig { delta: cfg.trend_window as i64, top_u: 100 }).unwrap();
    assert!(planted > 0.9, "{planted}");
    let noise = SynthConfig { p_trend: 0.0, ..cfg };
    let ds = preprocess(&synth_generate(&noise).unwrap(), &PreprocessConfig::default()).unwrap();
    let unplanted = average_overlap(&ds, &OverlapConfig { delta: 0, top_u: 100 }).unwrap();
    assert!(unplanted < planted);
}

#[test]
fn emitters_write_plot_ready_csv() {
    let ds = dataset(&[vec![(1, 0), (2, 3), (3, 3)], vec![(1, 2), (2, 8)]]);
    let dir = tempfile::tempdir().unwrap();
    let hist_path = dir.path().join("intervals.csv");
    write_interval_csv(&hist_path, &interval_distribution(&ds)).unwrap();
    assert_eq!(std::fs::read_to_string(&hist_path).unwrap(), "interval_days,count\n3,1\n6,1\n");
    let report = overlap_report(&ds, &OverlapConfig { delta: 2, top_u: 5 }).unwrap();
    let ov_path = dir.path().join("overlap.csv");
    write_overlap_csv(&ov_path, &report).unwrap();
    let text = std::fs::read_to_string(&ov_path).unwrap();
    assert!(text.starts_with("user,ratio\nu0,"));
    assert_eq!(text.lines().count(), 3);
}

fn small_log() -> impl Strategy<Value = Vec<Vec<(usize, i64)>>> {
    prop::collection::vec(prop::collection::vec((1usize..12, 0i64..5), 0..20), 1..=10).prop_map(|users| {
        users
            .into_iter()
            .map(|gaps| {
                let mut day = 0;
                gaps.into_iter()
                    .map(|(item, g)| {
                        day += g;
                        (item, day)
                    })
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn intervals_match_brute_force(seqs in small_log()) {
        let ds = dataset(&seqs);
        let h = interval_distribution(&ds);
        let (counts, zero) = brute_intervals(&ds);
        prop_assert_eq!(&h.counts, &counts.into_iter().collect::<BTreeMap<_, _>>());
        prop_assert_eq!(h.zero_count, zero);
        let expected: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
        prop_assert_eq!(h.total(), expected);
    }

    #[test]
    fn overlap_matches_brute_force_and_grows_with_delta(seqs in small_log(), delta in 0i64..40) {
        let ds = dataset(&seqs);
        let index = OverlapIndex::new(&ds);
        for u in 0..ds.num_users() {
            if ds.sequences[u].is_empty() {
                prop_assert!(index.ratio(u, delta).is_err());
                continue;
            }
            let r = index.ratio(u, delta).unwrap();
            prop_assert_eq!(r, brute_ratio(&ds, u, delta));
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(index.ratio(u, delta + 1).unwrap() >= r);
        }
    }
}
