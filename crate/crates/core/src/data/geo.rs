//! Great-circle distances and nearest-neighbour lists.

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Haversine distance in kilometres between two `(lat, lon)` points in degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// The `k` nearest other sites of every site, nearest first, ties broken by index.
pub fn haversine_knn(coords: &[(f64, f64)], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k >= coords.len() {
        return Err(Error::Neighbor(format!("k = {k} must be in 1..{}", coords.len())));
    }
    for &(lat, lon) in coords {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Data(format!("coordinates ({lat}, {lon}) out of range")));
        }
    }
    Ok(coords
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut others: Vec<(f64, usize)> = coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &b)| (haversine(a, b), j))
                .collect();
            others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn antipodes_and_identity() {
        let half = std::f64::consts::PI * EARTH_RADIUS_KM;
        assert!((haversine((0.0, 0.0), (0.0, 180.0)) - half).abs() < 1e-9);
        assert!((haversine((10.0, 20.0), (-10.0, -160.0)) - half).abs() < 1e-3);
        assert!((half - 20015.0).abs() < 1.0);
        assert_eq!(haversine((45.0, 7.0), (45.0, 7.0)), 0.0);
    }

    #[test]
    fn knn_matches_brute_force() {
        let cities = [(40.71, -74.01), (34.05, -118.24), (41.88, -87.63), (29.76, -95.37), (39.95, -75.17)];
        let lists = haversine_knn(&cities, 2).unwrap();
        // New York's nearest are Philadelphia then Chicago.
        assert_eq!(lists[0], vec![4, 2]);
        for (i, l) in lists.iter().enumerate() {
            let mut all: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            all.sort_by(|&x, &y| haversine(cities[i], cities[x]).total_cmp(&haversine(cities[i], cities[y])));
            assert_eq!(l, &all[..2]);
        }
    }

    #[test]
    fn ties_and_duplicates() {
        let pts = [(0.0, 0.0), (0.0, 1.0), (0.0, -1.0), (0.0, 0.0)];
        assert_eq!(haversine_knn(&pts, 2).unwrap()[0], vec![3, 1]);
        assert!(haversine_knn(&pts, 4).is_err());
        assert!(haversine_knn(&[(91.0, 0.0), (0.0, 0.0)], 1).is_err());
    }

    proptest! {
        #[test]
        fn metric_properties(a in (-90.0..90.0f64, -180.0..180.0f64), b in (-90.0..90.0f64, -180.0..180.0f64)) {
            let (d1, d2) = (haversine(a, b), haversine(b, a));
            prop_assert!((d1 - d2).abs() < 1e-9);
            prop_assert!(d1 >= 0.0);
            if a != b {
                prop_assert!(d1 > 0.0);
            }
        }
    }
}
