#![allow(dead_code)]

pub mod gradients;
pub mod reductions;

use std::path::PathBuf;

use efa_core::data::baskets::{preprocess_baskets, read_baskets_csv};
use efa_core::data::ratings::{preprocess_ratings_exp1, preprocess_ratings_exp2, read_ratings_csv};
use efa_core::data::temperature::{load_temperatures, read_temperatures_csv, YearRanges};
use efa_core::data::SequenceBatch;
use serde_json::{json, Value};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn tokens(b: &SequenceBatch) -> Vec<Vec<usize>> {
    b.sequences.iter().map(|s| s.tokens.clone()).collect()
}

fn values(b: &SequenceBatch) -> Vec<Vec<f64>> {
    b.sequences.iter().map(|s| s.values.clone().unwrap_or_default()).collect()
}

pub fn ratings_snapshot(exp2: bool) -> Value {
    let events = read_ratings_csv(&fixtures_dir().join("ratings.csv")).unwrap();
    let d = if exp2 {
        preprocess_ratings_exp2(&events, 3, 0).unwrap()
    } else {
        preprocess_ratings_exp1(&events, 3, 0).unwrap()
    };
    json!({
        "users": d.users,
        "items": d.items,
        "tokens": tokens(&d.all),
        "values": values(&d.all),
        "sparsity": d.all.sparsity(),
        "split_sizes": [d.splits.train.len(), d.splits.val.len(), d.splits.test.len()],
    })
}

pub fn baskets_snapshot() -> Value {
    let baskets = read_baskets_csv(&fixtures_dir().join("baskets.csv")).unwrap();
    let b = preprocess_baskets(&baskets, 2, 2).unwrap();
    json!({ "labels": b.labels, "tokens": tokens(&b) })
}

pub fn temperature_snapshot() -> Value {
    let rows = read_temperatures_csv(&fixtures_dir().join("temperatures.csv")).unwrap();
    let t = load_temperatures(&rows, YearRanges::default()).unwrap();
    let plain = t.splits(false).unwrap();
    let lag = t.splits(true).unwrap();
    let split = |s: &efa_core::data::Splits| json!([values(&s.train), values(&s.val), values(&s.test)]);
    let lagged = &lag.train.sequences[0];
    json!({
        "sites": t.sites.iter().map(|s| format!("{}, {}", s.city, s.region)).collect::<Vec<_>>(),
        "rejected": t.rejected.iter().map(|r| json!({"city": r.city, "missing": r.missing_dates})).collect::<Vec<_>>(),
        "values": split(&plain),
        "lag_values": split(&lag),
        "lag_segments": lagged.segments,
        "lag_targets": lagged.targets,
        "lag_tokens": lagged.tokens,
    })
}

/// Fixture outputs derived by hand from the rules applied to the CSV files.
pub fn hand_derived() -> [(&'static str, Value); 4] {
    [
        (
            "ratings_exp1",
            json!({
                "users": [1, 2, 3, 6, 7],
                "items": [10, 20, 30],
                "tokens": [[0, 1, 2], [0, 1], [2, 0], [2, 1], [2, 0, 1]],
                "values": [[5.0, 4.0, 3.0], [4.0, 2.0], [5.0, 3.0], [4.0, 3.0], [1.0, 2.0, 5.0]],
                "sparsity": 1.0 - 12.0 / 15.0,
                "split_sizes": [2, 0, 3],
            }),
        ),
        (
            "ratings_exp2",
            json!({
                "users": [1, 2, 3, 4, 6, 7],
                "items": [20, 10, 30],
                "tokens": [[1, 0, 2], [1], [2, 1], [0], [2, 0], [0]],
                "values": [[3.0, 2.0, 1.0], [2.0], [3.0, 1.0], [3.0], [2.0, 1.0], [3.0]],
                "sparsity": 1.0 - 10.0 / 18.0,
                "split_sizes": [3, 1, 2],
            }),
        ),
        (
            "baskets",
            json!({
                "labels": ["apple", "bread", "eggs", "milk"],
                "tokens": [[3, 1, 2], [1, 3], [2, 0, 3]],
            }),
        ),
        (
            "temperature",
            json!({
                "sites": ["Miami, FL", "Austin, TX", "Seattle, WA"],
                "rejected": [{"city": "Columbus", "missing": ["2016-10-01"]}],
                "values": [
                    [[28.5, 24.5, 12.5], [29.0, 25.0, 13.0]],
                    [[29.5, 25.5, 13.5], [30.0, 26.0, 14.0]],
                    [[30.5, 26.5, 14.5], [31.0, 27.0, 15.0]],
                ],
                "lag_values": [
                    [[29.0, 25.0, 13.0, 28.5, 24.5, 12.5]],
                    [[30.0, 26.0, 14.0, 29.5, 25.5, 13.5]],
                    [[31.0, 27.0, 15.0, 30.5, 26.5, 14.5]],
                ],
                "lag_segments": [0, 0, 0, 1, 1, 1],
                "lag_targets": [true, true, true, false, false, false],
                "lag_tokens": [0, 1, 2, 0, 1, 2],
            }),
        ),
    ]
}

pub fn computed() -> [(&'static str, Value); 4] {
    [
        ("ratings_exp1", ratings_snapshot(false)),
        ("ratings_exp2", ratings_snapshot(true)),
        ("baskets", baskets_snapshot()),
        ("temperature", temperature_snapshot()),
    ]
}

pub fn snapshot_text(v: &Value) -> String {
    serde_json::to_string_pretty(v).unwrap() + "\n"
}

/// Compares every fixture output with its hand derivation and with the
/// stored snapshot file, byte for byte.
pub fn check_fixture_snapshots() -> Result<(), String> {
    for ((name, got), (_, want)) in computed().into_iter().zip(hand_derived()) {
        if got != want {
            return Err(format!("{name}: {got} differs from hand derivation {want}"));
        }
        let path = fixtures_dir().join("snapshots").join(format!("{name}.json"));
        let stored = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if stored != snapshot_text(&got) {
            return Err(format!("{name}: output is not byte-identical to {}", path.display()));
        }
    }
    Ok(())
}
