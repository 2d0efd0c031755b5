//! Interaction ingestion, leave-one-out splits and direct-recommendation
//! candidate sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum sequence length for a train/valid/test split.
pub const MIN_INTERACTIONS: usize = 3;

/// Default number of negatives per direct-recommendation candidate set.
pub const DEFAULT_NEGATIVES: usize = 99;

/// Bijection between raw string ids and dense indices, in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexMap {
    to_dense: HashMap<String, usize>,
    to_raw: Vec<String>,
}

impl IndexMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.to_dense.get(raw) {
            return i;
        }
        let i = self.to_raw.len();
        self.to_dense.insert(raw.to_owned(), i);
        self.to_raw.push(raw.to_owned());
        i
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.to_dense.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.to_raw.get(dense).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_raw.is_empty()
    }

    pub fn from_raw_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut map = Self::default();
        for id in ids {
            map.intern(id.as_ref());
        }
        map
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    /// Chronological item indices per user; user `u` is `sequences[u]`.
    pub sequences: Vec<Vec<usize>>,
    pub users: IndexMap,
    pub items: IndexMap,
}

impl InteractionDataset {
    /// Builds a dataset from dense sequences, naming users `u{i}` and items `{i}`.
    pub fn from_sequences(sequences: Vec<Vec<usize>>, n_items: usize) -> Result<Self> {
        if let Some(&bad) = sequences.iter().flatten().find(|&&v| v >= n_items) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: n_items,
            });
        }
        let users = IndexMap::from_raw_ids((0..sequences.len()).map(|u| format!("u{u}")));
        let items = IndexMap::from_raw_ids((0..n_items).map(|v| v.to_string()));
        Ok(Self {
            sequences,
            users,
            items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    fn user_label(&self, u: usize) -> String {
        self.users.raw(u).map_or_else(|| u.to_string(), str::to_owned)
    }

    /// Writes the dataset back in the whitespace text format using raw ids.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            out.push_str(&self.user_label(u));
            for &v in seq {
                out.push(' ');
                out.push_str(self.items.raw(v).expect("item index in range"));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Raw ids of users dropped for having fewer than three interactions.
    pub rejected_users: Vec<String>,
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<(InteractionDataset, LoadReport)> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text)
}

/// Parses `user item item ...` lines. Duplicate items within a line are kept.
pub fn parse_interactions(text: &str) -> Result<(InteractionDataset, LoadReport)> {
    let mut seen_users = HashSet::new();
    let mut kept: Vec<(&str, Vec<&str>)> = Vec::new();
    let mut report = LoadReport::default();

    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(user) = fields.next() else { continue };
        if !seen_users.insert(user) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("duplicate user id `{user}`"),
            });
        }
        let items: Vec<&str> = fields.collect();
        if items.len() < MIN_INTERACTIONS {
            report.rejected_users.push(user.to_owned());
        } else {
            kept.push((user, items));
        }
    }

    let mut users = IndexMap::default();
    let mut item_map = IndexMap::default();
    let mut sequences = Vec::with_capacity(kept.len());
    for (user, items) in kept {
        users.intern(user);
        sequences.push(items.into_iter().map(|v| item_map.intern(v)).collect());
    }
    Ok((
        InteractionDataset {
            sequences,
            users,
            items: item_map,
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Train prefix followed by the validation item: the history used when
    /// predicting the test item.
    pub fn history_for_test(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub users: Vec<UserSplit>,
}

impl Splits {
    pub fn train_sequences(&self) -> Vec<&[usize]> {
        self.users.iter().map(|s| s.train.as_slice()).collect()
    }

    pub fn valid_targets(&self) -> Vec<usize> {
        self.users.iter().map(|s| s.valid).collect()
    }

    pub fn test_targets(&self) -> Vec<usize> {
        self.users.iter().map(|s| s.test).collect()
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for s in &self.users {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Last item to test, second-to-last to validation, the rest to train.
pub fn split_leave_one_out(ds: &InteractionDataset) -> Result<Splits> {
    let users = ds
        .sequences
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            if seq.len() < MIN_INTERACTIONS {
                return Err(Error::ShortSequence {
                    user: ds.user_label(u),
                    len: seq.len(),
                });
            }
            let n = seq.len();
            Ok(UserSplit {
                user: u,
                train: seq[..n - 2].to_vec(),
                valid: seq[n - 2],
                test: seq[n - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Splits { users })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    #[serde(skip)]
    pub seed: u64,
}

impl CandidateSet {
    /// Positive first, then negatives in sampled order.
    pub fn all_items(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.negatives.len() + 1);
        v.push(self.positive);
        v.extend_from_slice(&self.negatives);
        v
    }

    pub fn write_jsonl<W: Write>(sets: &[CandidateSet], w: &mut W) -> Result<()> {
        for s in sets {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Candidate sets whose positive is each user's test item.
pub fn sample_dr_candidates(
    ds: &InteractionDataset,
    splits: &Splits,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    sample_candidates(ds, &splits.test_targets(), n_neg, seed)
}

/// Draws `n_neg` negatives per user uniformly without replacement from the
/// items the user never interacted with.
///
/// Each user gets its own ChaCha8 stream (`seed`, stream = user index); the
/// eligible items are listed in ascending index order and the first `n_neg`
/// positions of a Fisher-Yates shuffle are taken. The result depends only on
/// `(seed, user, history, n_items)`, never on thread scheduling.
pub fn sample_candidates(
    ds: &InteractionDataset,
    positives: &[usize],
    n_neg: usize,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    if positives.len() != ds.n_users() {
        return Err(Error::shape(format!(
            "{} positives for {} users",
            positives.len(),
            ds.n_users()
        )));
    }
    let n_items = ds.n_items();
    ds.sequences
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            let history: HashSet<usize> = seq.iter().copied().collect();
            let mut eligible: Vec<usize> = (0..n_items).filter(|v| !history.contains(v)).collect();
            if eligible.len() < n_neg {
                return Err(Error::InsufficientItems {
                    user: ds.user_label(u),
                    needed: n_neg,
                    available: eligible.len(),
                });
            }
            let mut rng = user_rng(seed, u);
            let (picked, _) = eligible.partial_shuffle(&mut rng, n_neg);
            Ok(CandidateSet {
                user: u,
                positive: positives[u],
                negatives: picked.to_vec(),
                seed,
            })
        })
        .collect()
}

pub(crate) fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}
