//! Offline transition datasets and their line-oriented text format.
//!
//! ```text
//! underq-dataset v1, <state_dim>, <action_dim>, <discrete 0|1>, <count>, <seed>
//! <state...>, <action...>, <reward>, <next_state...>, <done 0|1>
//! ```
//!
//! Reals are written with 17 significant digits so a write/read cycle is
//! bit-exact. Discrete datasets store state and action indices as
//! one-dimensional vectors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "underq-dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// `next_state` is terminal; bootstrapping from it is masked.
    pub done: bool,
}

impl TransitionRecord {
    pub fn discrete(state: usize, action: usize, reward: f64, next_state: usize, done: bool) -> Self {
        Self {
            state: vec![state as f64],
            action: vec![action as f64],
            reward,
            next_state: vec![next_state as f64],
            done,
        }
    }

    pub fn state_index(&self) -> usize {
        self.state[0] as usize
    }

    pub fn action_index(&self) -> usize {
        self.action[0] as usize
    }

    pub fn next_state_index(&self) -> usize {
        self.next_state[0] as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    pub description: String,
    pub seed: u64,
    /// Lengths of the generating episodes, in record order. Not serialized.
    pub episode_lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    state_dim: usize,
    action_dim: usize,
    discrete: bool,
    records: Vec<TransitionRecord>,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        discrete: bool,
        records: Vec<TransitionRecord>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("dataset records"));
        }
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::param("dataset dimensions must be >= 1"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.state.len() != state_dim || r.next_state.len() != state_dim || r.action.len() != action_dim {
                return Err(Error::Shape(format!("record {i} does not match ({state_dim}, {action_dim})")));
            }
        }
        let lengths: usize = meta.episode_lengths.iter().sum();
        if !meta.episode_lengths.is_empty() && lengths != records.len() {
            return Err(Error::Shape("episode lengths do not cover the records".into()));
        }
        Ok(Self { state_dim, action_dim, discrete, records, meta })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn is_discrete(&self) -> bool {
        self.discrete
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends the records of `other`, which must have the same layout.
    pub fn extend(&mut self, other: OfflineDataset) -> Result<()> {
        if (other.state_dim, other.action_dim, other.discrete) != (self.state_dim, self.action_dim, self.discrete) {
            return Err(Error::Shape("cannot merge datasets with different layouts".into()));
        }
        let keep_episodes = !self.meta.episode_lengths.is_empty() && !other.meta.episode_lengths.is_empty();
        if keep_episodes {
            self.meta.episode_lengths.extend(other.meta.episode_lengths);
        } else {
            self.meta.episode_lengths.clear();
        }
        self.records.extend(other.records);
        Ok(())
    }

    /// Discounted return of every generating episode.
    pub fn episode_returns(&self, gamma: f64) -> Result<Vec<f64>> {
        if self.meta.episode_lengths.is_empty() {
            return Err(Error::param("dataset carries no episode boundaries"));
        }
        let mut out = Vec::with_capacity(self.meta.episode_lengths.len());
        let mut start = 0;
        for &len in &self.meta.episode_lengths {
            let ret = self.records[start..start + len].iter().rev().fold(0.0, |acc, r| r.reward + gamma * acc);
            out.push(ret);
            start += len;
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{DATASET_MAGIC}, {}, {}, {}, {}, {}",
            self.state_dim,
            self.action_dim,
            u8::from(self.discrete),
            self.records.len(),
            self.meta.seed
        );
        for r in &self.records {
            let mut first = true;
            for x in r.state.iter().chain(&r.action).chain(std::iter::once(&r.reward)).chain(&r.next_state) {
                if !first {
                    out.push_str(", ");
                }
                first = false;
                let _ = write!(out, "{x:.16e}");
            }
            let _ = writeln!(out, ", {}", u8::from(r.done));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 6 || fields[0] != DATASET_MAGIC {
            return Err(Error::Parse { line: 1, msg: format!("bad header `{header}`") });
        }
        let num = |i: usize| -> Result<u64> {
            fields[i].parse::<u64>().map_err(|e| Error::Parse { line: 1, msg: format!("header field {i}: {e}") })
        };
        let state_dim = num(1)? as usize;
        let action_dim = num(2)? as usize;
        let discrete = match num(3)? {
            0 => false,
            1 => true,
            other => return Err(Error::Parse { line: 1, msg: format!("discrete flag {other}") }),
        };
        let count = num(4)? as usize;
        let seed = num(5)?;
        let width = 2 * state_dim + action_dim + 2;
        let mut records = Vec::with_capacity(count);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != width {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {width} fields, got {}", parts.len()),
                });
            }
            let vals = parts[..width - 1]
                .iter()
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
            let done = match parts[width - 1] {
                "0" => false,
                "1" => true,
                other => return Err(Error::Parse { line: lineno, msg: format!("done flag `{other}`") }),
            };
            let (state, rest) = vals.split_at(state_dim);
            let (action, rest) = rest.split_at(action_dim);
            records.push(TransitionRecord {
                state: state.to_vec(),
                action: action.to_vec(),
                reward: rest[0],
                next_state: rest[1..].to_vec(),
                done,
            });
        }
        if records.len() != count {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header promises {count} records, found {}", records.len()),
            });
        }
        let meta = DatasetMeta { description: "loaded".into(), seed, episode_lengths: Vec::new() };
        Self::new(state_dim, action_dim, discrete, records, meta)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> OfflineDataset {
        let records = vec![
            TransitionRecord {
                state: vec![0.1, -2.5e-300],
                action: vec![1.0 / 3.0],
                reward: -0.0,
                next_state: vec![f64::MIN_POSITIVE, 7.0],
                done: false,
            },
            TransitionRecord {
                state: vec![1e300, 0.2],
                action: vec![-1.0],
                reward: 0.7,
                next_state: vec![0.0, 0.3],
                done: true,
            },
        ];
        OfflineDataset::new(2, 1, false, records, DatasetMeta { seed: 5, ..Default::default() }).unwrap()
    }

    #[test]
    fn header_layout() {
        let text = sample().to_text();
        assert!(text.starts_with("underq-dataset v1, 2, 1, 0, 2, 5\n"));
        assert!(text.lines().nth(2).unwrap().ends_with(", 1"));
    }

    #[test]
    fn rejects_malformed() {
        assert!(OfflineDataset::parse("").is_err());
        assert!(OfflineDataset::parse("underq-dataset v2, 1, 1, 0, 0, 0").is_err());
        let mut text = sample().to_text();
        text.push_str("1, 2\n");
        assert!(OfflineDataset::parse(&text).is_err());
        assert!(OfflineDataset::new(1, 1, true, vec![], DatasetMeta::default()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in prop::collection::vec(
                (prop::array::uniform3(any::<f64>().prop_filter("finite", |x| x.is_finite())), any::<bool>()),
                1..20,
            )
        ) {
            let records: Vec<_> = rows
                .iter()
                .map(|(v, d)| TransitionRecord { state: vec![v[0]], action: vec![v[1]], reward: v[2], next_state: vec![v[0]], done: *d })
                .collect();
            let ds = OfflineDataset::new(1, 1, false, records, DatasetMeta::default()).unwrap();
            let back = OfflineDataset::parse(&ds.to_text()).unwrap();
            prop_assert_eq!(ds.records().len(), back.records().len());
            for (a, b) in ds.records().iter().zip(back.records()) {
                prop_assert_eq!(a.reward.to_bits(), b.reward.to_bits());
                prop_assert_eq!(a.state[0].to_bits(), b.state[0].to_bits());
                prop_assert_eq!(a.action[0].to_bits(), b.action[0].to_bits());
                prop_assert_eq!(a.done, b.done);
            }
        }
    }

    #[test]
    fn round_trip_extremes() {
        let ds = sample();
        let back = OfflineDataset::parse(&ds.to_text()).unwrap();
        assert_eq!(ds.records(), back.records());
        assert!(back.records()[0].reward.is_sign_negative());
    }
}
