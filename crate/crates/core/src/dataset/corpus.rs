use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use super::ingest::Interaction;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub external_id: String,
    /// Dense item indices in chronological order.
    pub items: Vec<usize>,
    pub split: Split,
}

/// Relabeled, time-ordered interaction sequences.
///
/// Users and items carry dense indices assigned in order of first
/// appearance; user `u` is `users[u]`.
#[derive(Clone, Debug)]
pub struct Corpus {
    users: Vec<UserSequence>,
    item_ids: Vec<String>,
    item_lookup: HashMap<String, usize>,
    user_lookup: HashMap<String, usize>,
    // sorted distinct items per user
    item_sets: Vec<Vec<usize>>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.users == other.users && self.item_ids == other.item_ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub mean_sequence_length: f64,
    pub train_users: usize,
    pub test_users: usize,
}

impl CorpusStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("users,items,interactions,mean_sequence_length,train_users,test_users\n");
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{},{}",
            self.users,
            self.items,
            self.interactions,
            self.mean_sequence_length,
            self.train_users,
            self.test_users
        );
        s
    }
}

/// How many test users survived the split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitReport {
    pub train_users: usize,
    pub test_users: usize,
    pub dropped_test_users: usize,
}

impl Corpus {
    /// Assembles a corpus from sequences of external item ids, relabeling
    /// items by first appearance in user order.
    pub(crate) fn from_external(users: Vec<(String, Vec<String>, Split)>) -> Result<Self> {
        let mut item_ids = Vec::new();
        let mut item_lookup = HashMap::new();
        let mut seqs = Vec::with_capacity(users.len());
        for (uid, items, split) in users {
            let dense = items
                .into_iter()
                .map(|it| {
                    let next = item_ids.len();
                    *item_lookup.entry(it.clone()).or_insert_with(|| {
                        item_ids.push(it);
                        next
                    })
                })
                .collect();
            seqs.push(UserSequence {
                external_id: uid,
                items: dense,
                split,
            });
        }
        Corpus::from_parts(seqs, item_ids)
    }

    pub(crate) fn from_parts(users: Vec<UserSequence>, item_ids: Vec<String>) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::EmptyCorpus("no users".into()));
        }
        let item_lookup: HashMap<String, usize> = item_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        if item_lookup.len() != item_ids.len() {
            return Err(Error::Format("duplicate item ids".into()));
        }
        let user_lookup: HashMap<String, usize> = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.external_id.clone(), i))
            .collect();
        if user_lookup.len() != users.len() {
            return Err(Error::Format("duplicate user ids".into()));
        }
        let mut item_sets = Vec::with_capacity(users.len());
        for u in &users {
            if let Some(&bad) = u.items.iter().find(|&&i| i >= item_ids.len()) {
                return Err(Error::Format(format!(
                    "user {} references item {bad} outside vocabulary",
                    u.external_id
                )));
            }
            let mut set = u.items.clone();
            set.sort_unstable();
            set.dedup();
            item_sets.push(set);
        }
        Ok(Corpus {
            users,
            item_ids,
            item_lookup,
            user_lookup,
            item_sets,
        })
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn user(&self, u: usize) -> &UserSequence {
        &self.users[u]
    }

    pub fn sequence(&self, u: usize) -> &[usize] {
        &self.users[u].items
    }

    /// Sorted distinct items of user `u`.
    pub fn item_set(&self, u: usize) -> &[usize] {
        &self.item_sets[u]
    }

    pub fn has_interacted(&self, u: usize, item: usize) -> bool {
        self.item_sets[u].binary_search(&item).is_ok()
    }

    pub fn item_external(&self, i: usize) -> &str {
        &self.item_ids[i]
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn item_dense(&self, external: &str) -> Option<usize> {
        self.item_lookup.get(external).copied()
    }

    pub fn user_dense(&self, external: &str) -> Option<usize> {
        self.user_lookup.get(external).copied()
    }

    pub fn split_of(&self, u: usize) -> Split {
        self.users[u].split
    }

    pub fn users_in(&self, split: Split) -> Vec<usize> {
        (0..self.users.len())
            .filter(|&u| self.users[u].split == split)
            .collect()
    }

    pub fn stats(&self) -> CorpusStats {
        let interactions: usize = self.users.iter().map(|u| u.items.len()).sum();
        CorpusStats {
            users: self.users.len(),
            items: self.item_ids.len(),
            interactions,
            mean_sequence_length: interactions as f64 / self.users.len() as f64,
            train_users: self.users_in(Split::Train).len(),
            test_users: self.users_in(Split::Test).len(),
        }
    }
}

/// Drops short users, orders everything chronologically and relabels ids.
///
/// Per-user sequences are sorted by timestamp with ties kept in input order.
/// Users are ordered by first transaction time, then external id.
pub fn preprocess(raw: &[Interaction], k: usize, min_len: usize) -> Result<Corpus> {
    if k < 3 {
        return Err(Error::Config(format!("K must be at least 3, got {k}")));
    }
    if min_len < k {
        return Err(Error::Config(format!(
            "min_len ({min_len}) must be at least K ({k})"
        )));
    }
    let mut by_user: BTreeMap<&str, Vec<(u64, usize, &str)>> = BTreeMap::new();
    for (pos, x) in raw.iter().enumerate() {
        by_user
            .entry(x.user.as_str())
            .or_default()
            .push((x.timestamp, pos, x.item.as_str()));
    }
    let mut kept: Vec<(u64, &str, Vec<(u64, usize, &str)>)> = by_user
        .into_iter()
        .filter(|(_, evs)| evs.len() >= min_len)
        .map(|(uid, mut evs)| {
            evs.sort_by_key(|&(t, pos, _)| (t, pos));
            (evs[0].0, uid, evs)
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no user has at least {min_len} interactions"
        )));
    }
    kept.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let users = kept
        .into_iter()
        .map(|(_, uid, evs)| {
            (
                uid.to_string(),
                evs.into_iter().map(|(_, _, it)| it.to_string()).collect(),
                Split::Train,
            )
        })
        .collect();
    Corpus::from_external(users)
}

/// Labels the last `ceil(test_fraction * U)` users as test users, then drops
/// test users whose first `k` items include one no training user has seen.
pub fn split_users(corpus: &Corpus, test_fraction: f64, k: usize) -> Result<(Corpus, SplitReport)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = corpus.user_count();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 users, have {n}")));
    }
    let n_test = ((test_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let first_test = n - n_test;
    let seen: HashSet<usize> = corpus.users[..first_test]
        .iter()
        .flat_map(|u| u.items.iter().copied())
        .collect();

    let mut users = Vec::with_capacity(n);
    let mut dropped = 0;
    for (idx, u) in corpus.users.iter().enumerate() {
        let mut u = u.clone();
        if idx >= first_test {
            let prefix = &u.items[..k.min(u.items.len())];
            if prefix.iter().any(|i| !seen.contains(i)) {
                dropped += 1;
                continue;
            }
            u.split = Split::Test;
        } else {
            u.split = Split::Train;
        }
        users.push(u);
    }
    if dropped == n_test {
        return Err(Error::Split(format!(
            "all {n_test} test users reference items unseen in training; try a larger test fraction"
        )));
    }
    let out = Corpus::from_parts(users, corpus.item_ids.clone())?;
    let report = SplitReport {
        train_users: first_test,
        test_users: n_test - dropped,
        dropped_test_users: dropped,
    };
    Ok((out, report))
}
