//! Ratings logs (`user,item,rating,timestamp`) turned into per-user viewing sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sequence, SequenceBatch, Splits};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingsEvent {
    pub user: u64,
    pub item: u64,
    pub rating: i64,
    pub timestamp: i64,
}

pub fn read_ratings_csv(path: &Path) -> Result<Vec<RatingsEvent>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingPath { path: path.to_path_buf() },
        _ => Error::Csv(e),
    })?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Preprocessed ratings: every user in one batch plus the user split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingsData {
    pub all: SequenceBatch,
    /// Original user id of each sequence of `all`.
    pub users: Vec<u64>,
    /// Original item id of each token.
    pub items: Vec<u64>,
    pub splits: Splits,
}

impl RatingsData {
    pub fn user_count(&self) -> usize {
        self.all.len()
    }
}

/// Top-`top_n` items by distinct users, users with fewer duplicate
/// timestamps than half their reviews, one random item per timestamp,
/// ordered by time and split 9 : 3 : 4 over a seeded shuffle of users.
pub fn preprocess_ratings_exp1(events: &[RatingsEvent], top_n: usize, seed: u64) -> Result<RatingsData> {
    if events.is_empty() {
        return Err(Error::Data("no ratings events".into()));
    }
    let mut users_per_item: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for e in events {
        users_per_item.entry(e.item).or_default().insert(e.user);
    }
    let mut ranked: Vec<(u64, usize)> = users_per_item.iter().map(|(&i, u)| (i, u.len())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let items: Vec<u64> = ranked.into_iter().take(top_n).map(|(i, _)| i).collect();
    let index: BTreeMap<u64, usize> = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let mut per_user: BTreeMap<u64, Vec<&RatingsEvent>> = BTreeMap::new();
    for e in events.iter().filter(|e| index.contains_key(&e.item)) {
        per_user.entry(e.user).or_default().push(e);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::new();
    let mut sequences = Vec::new();
    for (&user, evs) in &per_user {
        let mut by_time: BTreeMap<i64, Vec<&RatingsEvent>> = BTreeMap::new();
        for &e in evs {
            by_time.entry(e.timestamp).or_default().push(e);
        }
        if evs.len() >= 2 * by_time.len() {
            continue;
        }
        let mut tokens = Vec::with_capacity(by_time.len());
        let mut values = Vec::with_capacity(by_time.len());
        for (_, mut group) in by_time {
            group.sort_by_key(|e| (e.item, e.rating));
            let e = group[rng.gen_range(0..group.len())];
            tokens.push(index[&e.item]);
            values.push(e.rating as f64);
        }
        users.push(user);
        sequences.push(Sequence::with_values(tokens, values));
    }
    if sequences.is_empty() {
        return Err(Error::Data("no users survive filtering".into()));
    }

    let mut all = SequenceBatch::new(items.len(), sequences)?;
    all.labels = Some(items.iter().map(u64::to_string).collect());
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng);
    let n = order.len();
    let n_train = n * 9 / 16;
    let n_val = n * 3 / 16;
    let pick = |range: &[usize]| {
        let mut r = range.to_vec();
        r.sort();
        all.subset(&r)
    };
    let splits = Splits {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    };
    Ok(RatingsData { all, users, items, splits })
}

/// Ratings 3, 4 and 5 shifted down to 1, 2 and 3, then the same pipeline.
pub fn preprocess_ratings_exp2(events: &[RatingsEvent], top_n: usize, seed: u64) -> Result<RatingsData> {
    let kept: Vec<RatingsEvent> = events
        .iter()
        .filter(|e| (3..=5).contains(&e.rating))
        .map(|e| RatingsEvent {
            rating: e.rating - 2,
            ..e.clone()
        })
        .collect();
    preprocess_ratings_exp1(&kept, top_n, seed)
}
