//! Interaction logs, preprocessing, fixed-length sequences and synthetic corpora.

mod preprocess;
mod sequences;
mod synth;

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use preprocess::{preprocess, FilterMode, PreprocessConfig};
pub use sequences::{
    batches, build_sequences, make_eval_instance, sample_negatives, training_rows, Batch, EvalInstance,
    SequenceRow, Split,
};
pub use synth::{synth_generate, SynthConfig};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Padding token; occupies row 0 of the item table.
pub const PAD: usize = 0;

/// One implicit-feedback event.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// `floor(timestamp / 86400) − origin_day`.
pub fn day_index(timestamp: i64, origin_day: i64) -> i64 {
    timestamp.div_euclid(SECONDS_PER_DAY) - origin_day
}

/// A user's event after ID remapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Internal item index in `1..=num_items`.
    pub item: usize,
    /// Day index relative to the dataset's first day.
    pub day: i64,
    pub timestamp: i64,
}

/// Filtered, remapped interaction sequences.
///
/// Item indices run `1..=num_items`; `0` is [`PAD`] and `num_items + 1` is the
/// mask token. Days are offsets from `origin_day`, so they fall in
/// `0..num_days`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub sequences: Vec<Vec<Event>>,
    /// Absolute day (days since epoch) of day index 0.
    pub origin_day: i64,
    pub num_days: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_actions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
    pub num_days: usize,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn mask_token(&self) -> usize {
        self.num_items() + 1
    }

    /// Rows of the item table: items plus PAD and MASK.
    pub fn vocab_rows(&self) -> usize {
        self.num_items() + 2
    }

    pub fn num_actions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn user_index(&self, user: &str) -> Option<usize> {
        self.user_ids.iter().position(|u| u == user)
    }

    /// Clamps a day index into the table range `[0, num_days)`.
    pub fn clamp_day(&self, day: i64) -> i64 {
        day.clamp(0, self.num_days as i64 - 1)
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.num_users();
        let items = self.num_items();
        let actions = self.num_actions();
        DatasetStats {
            num_users: users,
            num_items: items,
            num_actions: actions,
            avg_length: if users == 0 { 0.0 } else { actions as f64 / users as f64 },
            sparsity: if users * items == 0 {
                1.0
            } else {
                1.0 - actions as f64 / (users as f64 * items as f64)
            },
            num_days: self.num_days,
        }
    }

    /// Re-expands the dataset into raw interactions (original timestamps).
    pub fn to_interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::with_capacity(self.num_actions());
        for (u, seq) in self.sequences.iter().enumerate() {
            for e in seq {
                out.push(Interaction::new(
                    self.user_ids[u].clone(),
                    self.item_ids[e.item - 1].clone(),
                    e.timestamp,
                ));
            }
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

const HEADER: [&str; 3] = ["user_id", "item_id", "timestamp"];

/// Reads a `user_id,item_id,timestamp` CSV in file order.
pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    read_interactions(std::fs::File::open(path)?)
}

pub fn read_interactions(reader: impl Read) -> Result<Vec<Interaction>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}`, found `{}`", HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let timestamp: i64 = record[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("timestamp `{}` is not an integer", &record[2]),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                line,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        out.push(Interaction::new(&record[0], &record[1], timestamp));
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(HEADER)?;
    for it in interactions {
        wtr.write_record([it.user.as_str(), it.item.as_str(), &it.timestamp.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
