//! Five-movie ratings whose laws depend on the viewing order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Sequence, SequenceBatch, Splits};
use crate::error::{Error, Result};

pub const MOVIES: usize = 5;

/// Mean rating of every position of a viewing order. Movies are numbered
/// 1 to 5 in `order`.
pub fn rule_means(order: &[usize]) -> Vec<f64> {
    let at = |movie: usize| order.iter().position(|&m| m == movie);
    order
        .iter()
        .enumerate()
        .map(|(i, &movie)| {
            let prev = i.checked_sub(1).map(|p| order[p]);
            match movie {
                2 => match (at(1), at(2)) {
                    (Some(a), Some(b)) if a < b => 1.0,
                    _ => 5.0,
                },
                4 if prev == Some(3) => 1.0,
                3 if prev == Some(4) => 1.0,
                5 if i + 1 == order.len() => 5.0,
                _ => 3.0,
            }
        })
        .collect()
}

/// `n_users` random orders of the five movies with their ratings. Token `t`
/// stands for movie `t + 1`.
pub fn generate_synthetic_ratings(n_users: usize, seed: u64) -> Result<SequenceBatch> {
    if n_users == 0 {
        return Err(Error::Contract("at least one user is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sequences = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let mut order: Vec<usize> = (1..=MOVIES).collect();
        order.shuffle(&mut rng);
        let values = rule_means(&order).into_iter().map(|m| m + noise.sample(&mut rng)).collect();
        sequences.push(Sequence::with_values(order.iter().map(|m| m - 1).collect(), values));
    }
    let mut batch = SequenceBatch::new(MOVIES, sequences)?;
    batch.labels = Some((1..=MOVIES).map(|m| format!("movie {m}")).collect());
    Ok(batch)
}

/// Independent train, validation and test draws.
pub fn synthetic_splits(train: usize, val: usize, test: usize, seed: u64) -> Result<Splits> {
    Ok(Splits {
        train: generate_synthetic_ratings(train, seed)?,
        val: generate_synthetic_ratings(val, seed.wrapping_add(1))?,
        test: generate_synthetic_ratings(test, seed.wrapping_add(2))?,
    })
}

/// Mean squared error of the rule-table predictor, the best possible on average.
pub fn oracle_mse(batch: &SequenceBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for s in &batch.sequences {
        let order: Vec<usize> = s.tokens.iter().map(|t| t + 1).collect();
        let values = s.values.as_ref().expect("synthetic sequences carry values");
        for (m, y) in rule_means(&order).iter().zip(values) {
            total += (m - y).powi(2);
            count += 1;
        }
    }
    total / count as f64
}
