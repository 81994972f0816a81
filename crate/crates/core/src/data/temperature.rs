//! Daily October temperatures per city (`region,city,lat,lon,date,temp`),
//! one cross-section of all cities per date.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{Sequence, SequenceBatch, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub region: String,
    pub city: String,
    pub lat: f64,
    pub lon: f64,
    pub date: String,
    /// Empty cells are missing readings.
    pub temp: Option<f64>,
}

pub fn read_temperatures_csv(path: &Path) -> Result<Vec<TemperatureRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingPath { path: path.to_path_buf() },
        _ => Error::Csv(e),
    })?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub region: String,
    pub city: String,
    pub lat: f64,
    pub lon: f64,
}

/// Inclusive year ranges of the three splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRanges {
    pub train: (i32, i32),
    pub val: (i32, i32),
    pub test: (i32, i32),
}

impl Default for YearRanges {
    fn default() -> Self {
        YearRanges {
            train: (2007, 2012),
            val: (2013, 2016),
            test: (2017, 2019),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub region: String,
    pub city: String,
    pub missing_dates: Vec<String>,
}

/// Complete October readings of the surviving sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureData {
    pub sites: Vec<Site>,
    pub rejected: Vec<Rejection>,
    pub ranges: YearRanges,
    /// Readings per date in site order.
    pub readings: BTreeMap<NaiveDate, Vec<f64>>,
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Data(format!("bad date {s:?}: {e}")))
}

fn within(range: (i32, i32), d: NaiveDate) -> bool {
    (range.0..=range.1).contains(&d.year())
}

/// Keeps October dates inside the year ranges and rejects every site
/// lacking a reading on any of those dates.
pub fn load_temperatures(rows: &[TemperatureRow], ranges: YearRanges) -> Result<TemperatureData> {
    let mut sites: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    let mut values: BTreeMap<(String, String), BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    let mut dates = BTreeSet::new();
    for r in rows {
        if !(-90.0..=90.0).contains(&r.lat) || !(-180.0..=180.0).contains(&r.lon) {
            return Err(Error::Data(format!(
                "{}, {}: coordinates ({}, {}) out of range",
                r.city, r.region, r.lat, r.lon
            )));
        }
        let key = (r.region.clone(), r.city.clone());
        sites.entry(key.clone()).or_insert((r.lat, r.lon));
        let d = parse_date(&r.date)?;
        if d.month() != 10 || ![ranges.train, ranges.val, ranges.test].iter().any(|&y| within(y, d)) {
            continue;
        }
        dates.insert(d);
        if let Some(t) = r.temp.filter(|t| t.is_finite()) {
            values.entry(key).or_default().insert(d, t);
        }
    }
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for ((region, city), (lat, lon)) in sites {
        let have = values.remove(&(region.clone(), city.clone())).unwrap_or_default();
        let missing: Vec<String> = dates.iter().filter(|d| !have.contains_key(d)).map(|d| d.to_string()).collect();
        if missing.is_empty() {
            kept.push((Site { region, city, lat, lon }, have));
        } else {
            rejected.push(Rejection {
                region,
                city,
                missing_dates: missing,
            });
        }
    }
    if kept.len() < 2 || dates.is_empty() {
        return Err(Error::Data("fewer than two complete sites".into()));
    }
    let readings = dates.iter().map(|&d| (d, kept.iter().map(|(_, v)| v[&d]).collect())).collect();
    Ok(TemperatureData {
        sites: kept.into_iter().map(|(s, _)| s).collect(),
        rejected,
        ranges,
        readings,
    })
}

impl TemperatureData {
    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.sites.iter().map(|s| (s.lat, s.lon)).collect()
    }

    /// `(lat, lon)` per site as a `sites × 2` matrix.
    pub fn attributes(&self) -> Tensor {
        Tensor::from_fn(
            self.sites.len(),
            2,
            |r, c| if c == 0 { self.sites[r].lat } else { self.sites[r].lon },
        )
    }

    fn batch(&self, range: (i32, i32), lag: bool) -> Result<SequenceBatch> {
        let n = self.sites.len();
        let mut sequences = Vec::new();
        for (&d, today) in self.readings.iter().filter(|(&d, _)| within(range, d)) {
            if !lag {
                sequences.push(Sequence::with_values((0..n).collect(), today.clone()));
                continue;
            }
            let Some(yesterday) = d.pred_opt().and_then(|p| self.readings.get(&p)) else {
                continue;
            };
            let mut s = Sequence::with_values(
                (0..2 * n).map(|j| j % n).collect(),
                today.iter().chain(yesterday).copied().collect(),
            );
            s.segments = Some((0..2 * n).map(|j| j / n).collect());
            s.targets = Some((0..2 * n).map(|j| j < n).collect());
            sequences.push(s);
        }
        if sequences.is_empty() {
            return Err(Error::Data(format!("no dates in {}-{}", range.0, range.1)));
        }
        let mut b = SequenceBatch::new(n, sequences)?;
        b.attributes = Some(self.attributes());
        b.labels = Some(self.sites.iter().map(|s| format!("{}, {}", s.city, s.region)).collect());
        Ok(b)
    }

    /// Cross-sections per split. With `lag`, each sequence appends the
    /// previous day's readings as context-only columns in segment 1; dates
    /// without a loaded previous day are skipped.
    pub fn splits(&self, lag: bool) -> Result<Splits> {
        Ok(Splits {
            train: self.batch(self.ranges.train, lag)?,
            val: self.batch(self.ranges.val, lag)?,
            test: self.batch(self.ranges.test, lag)?,
        })
    }
}
