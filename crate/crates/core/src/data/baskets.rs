//! Shopping baskets (`basket_id,position,item`) as ordered item sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sequence, SequenceBatch};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basket {
    pub id: String,
    pub items: Vec<String>,
}

#[derive(Deserialize)]
struct Row {
    basket_id: String,
    position: u64,
    item: String,
}

/// Reads baskets in order of first appearance, items sorted by position.
pub fn read_baskets_csv(path: &Path) -> Result<Vec<Basket>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingPath { path: path.to_path_buf() },
        _ => Error::Csv(e),
    })?;
    let mut order = Vec::new();
    let mut rows: BTreeMap<String, Vec<(u64, String)>> = BTreeMap::new();
    for r in reader.deserialize::<Row>() {
        let r = r.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if !rows.contains_key(&r.basket_id) {
            order.push(r.basket_id.clone());
        }
        rows.entry(r.basket_id).or_default().push((r.position, r.item));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let mut items = rows.remove(&id).unwrap_or_default();
            items.sort_by_key(|(p, _)| *p);
            Basket {
                id,
                items: items.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect())
}

/// Keeps items found in at least `min_basket_count` baskets, then baskets
/// holding at least `min_items_per_basket` of them. Tokens index the
/// surviving items in sorted order; labels hold their names.
pub fn preprocess_baskets(baskets: &[Basket], min_basket_count: usize, min_items_per_basket: usize) -> Result<SequenceBatch> {
    if baskets.is_empty() {
        return Err(Error::Data("no baskets".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for b in baskets {
        let distinct: BTreeSet<&str> = b.items.iter().map(String::as_str).collect();
        for i in distinct {
            *counts.entry(i).or_default() += 1;
        }
    }
    let kept: Vec<&str> = counts.iter().filter(|(_, &c)| c >= min_basket_count).map(|(&i, _)| i).collect();
    let index: BTreeMap<&str, usize> = kept.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let sequences: Vec<Sequence> = baskets
        .iter()
        .map(|b| b.items.iter().filter_map(|i| index.get(i.as_str()).copied()).collect::<Vec<_>>())
        .filter(|t| !t.is_empty() && t.len() >= min_items_per_basket)
        .map(Sequence::tokens)
        .collect();
    if sequences.is_empty() || kept.len() < 2 {
        return Err(Error::Data("no baskets survive filtering".into()));
    }
    let mut batch = SequenceBatch::new(kept.len(), sequences)?;
    batch.labels = Some(kept.iter().map(|s| s.to_string()).collect());
    Ok(batch)
}

/// Seeded partition into `(train, test)` with `test_fraction` of the baskets held out.
pub fn split_baskets(batch: &SequenceBatch, test_fraction: f64, seed: u64) -> (SequenceBatch, SequenceBatch) {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (batch.len() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort();
    test.sort();
    (batch.subset(&train), batch.subset(&test))
}
