//! Geographic coordinates, great-circle distance and a grid index for
//! radius queries.
//!
//! Distances are in miles on a sphere of mean Earth radius. The index buckets
//! points into fixed-size latitude/longitude cells; a query expands to every
//! cell that can intersect the spherical cap and then filters candidates with
//! the exact haversine distance, so results match a brute-force scan.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.7613;

/// Slack added to candidate-cell bounds so rounding never drops a point that
/// the exact distance filter would accept.
const CELL_PAD_DEG: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl GeoPoint {
    /// Validates the coordinate. Longitude 180 is accepted and stored as -180.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        let invalid = Error::InvalidCoordinate {
            lat: lat_deg,
            lon: lon_deg,
        };
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(invalid);
        }
        if !(-90.0..=90.0).contains(&lat_deg) || !(-180.0..=180.0).contains(&lon_deg) {
            return Err(invalid);
        }
        let lon_deg = if lon_deg == 180.0 { -180.0 } else { lon_deg };
        Ok(Self { lat_deg, lon_deg })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    pub fn normalize(&self) -> NormalizedGeo {
        NormalizedGeo {
            x: self.lat_deg / 90.0,
            y: self.lon_deg / 180.0,
        }
    }
}

/// Latitude and longitude scaled into `[-1, 1] x [-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedGeo {
    pub x: f64,
    pub y: f64,
}

impl NormalizedGeo {
    pub fn to_geo_point(&self) -> Result<GeoPoint> {
        GeoPoint::new(self.x * 90.0, self.y * 180.0)
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Validating wrapper around [`GeoPoint::normalize`] for raw degrees.
pub fn normalize(lat_deg: f64, lon_deg: f64) -> Result<NormalizedGeo> {
    Ok(GeoPoint::new(lat_deg, lon_deg)?.normalize())
}

/// Great-circle distance in miles.
pub fn haversine_miles(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon_deg - a.lon_deg).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Grid index over observation points. Immutable once built.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell_size_deg: f64,
    lat_bands: i32,
    lon_bands: i32,
    cells: BTreeMap<(i32, i32), Vec<u64>>,
    points: BTreeMap<u64, GeoPoint>,
}

impl SpatialIndex {
    pub fn build(points: &[(u64, GeoPoint)], cell_size_deg: f64) -> Result<Self> {
        if !(cell_size_deg.is_finite() && cell_size_deg > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size_deg}"
            )));
        }
        let lat_bands = (180.0 / cell_size_deg).ceil() as i32;
        let lon_bands = (360.0 / cell_size_deg).ceil() as i32;
        let mut index = Self {
            cell_size_deg,
            lat_bands,
            lon_bands,
            cells: BTreeMap::new(),
            points: BTreeMap::new(),
        };
        for &(id, p) in points {
            if index.points.insert(id, p).is_some() {
                return Err(Error::DuplicateId(id));
            }
            let cell = (index.lat_band(p.lat_deg), index.lon_band(p.lon_deg));
            index.cells.entry(cell).or_default().push(id);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_size_deg(&self) -> f64 {
        self.cell_size_deg
    }

    pub fn get(&self, id: u64) -> Option<GeoPoint> {
        self.points.get(&id).copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&(i32, i32), &Vec<u64>)> {
        self.cells.iter()
    }

    /// Ids within `theta_miles` (inclusive) of `center`, ascending.
    pub fn radius_query(&self, center: GeoPoint, theta_miles: f64) -> Result<Vec<u64>> {
        if theta_miles.is_nan() || theta_miles < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "radius must be non-negative, got {theta_miles}"
            )));
        }
        let mut hits = Vec::new();
        let mut visit = |ids: &[u64]| {
            for &id in ids {
                let p = self.points[&id];
                if haversine_miles(center, p) <= theta_miles {
                    hits.push(id);
                }
            }
        };

        let angular_deg = (theta_miles / EARTH_RADIUS_MILES).to_degrees();
        if angular_deg >= 180.0 {
            for ids in self.cells.values() {
                visit(ids);
            }
        } else {
            let lat_lo = center.lat_deg - angular_deg - CELL_PAD_DEG;
            let lat_hi = center.lat_deg + angular_deg + CELL_PAD_DEG;
            let band_lo = self.lat_band(lat_lo.max(-90.0));
            let band_hi = self.lat_band(lat_hi.min(90.0));
            let lon_ranges = if lat_lo <= -90.0 || lat_hi >= 90.0 {
                // cap contains a pole
                vec![(0, self.lon_bands - 1)]
            } else {
                let ratio = angular_deg.to_radians().sin() / center.lat_deg.to_radians().cos();
                if ratio >= 1.0 {
                    vec![(0, self.lon_bands - 1)]
                } else {
                    let span = ratio.asin().to_degrees() + CELL_PAD_DEG;
                    self.lon_band_ranges(center.lon_deg - span, center.lon_deg + span)
                }
            };
            for band in band_lo..=band_hi {
                for &(lo, hi) in &lon_ranges {
                    for (_, ids) in self.cells.range((band, lo)..=(band, hi)) {
                        visit(ids);
                    }
                }
            }
        }
        hits.sort_unstable();
        Ok(hits)
    }

    fn lat_band(&self, lat: f64) -> i32 {
        (((lat + 90.0) / self.cell_size_deg).floor() as i32).clamp(0, self.lat_bands - 1)
    }

    fn lon_band(&self, lon: f64) -> i32 {
        (((lon + 180.0) / self.cell_size_deg).floor() as i32).clamp(0, self.lon_bands - 1)
    }

    /// Band intervals covering `[lo, hi]` degrees, splitting at the antimeridian.
    fn lon_band_ranges(&self, lo: f64, hi: f64) -> Vec<(i32, i32)> {
        if hi - lo >= 360.0 {
            return vec![(0, self.lon_bands - 1)];
        }
        let last = self.lon_bands - 1;
        let mut ranges = Vec::with_capacity(2);
        if lo < -180.0 {
            ranges.push((self.lon_band(lo + 360.0), last));
            ranges.push((0, self.lon_band(hi)));
        } else if hi >= 180.0 {
            ranges.push((self.lon_band(lo), last));
            ranges.push((0, self.lon_band(hi - 360.0)));
        } else {
            ranges.push((self.lon_band(lo), self.lon_band(hi)));
        }
        ranges
    }
}

/// Reference scan over every point. Used to cross-check the index.
pub fn brute_force_radius(
    points: &[(u64, GeoPoint)],
    center: GeoPoint,
    theta_miles: f64,
) -> Vec<u64> {
    let mut ids: Vec<u64> = points
        .iter()
        .filter(|(_, p)| haversine_miles(center, *p) <= theta_miles)
        .map(|(id, _)| *id)
        .collect();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gp(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize(0.0, 0.0).unwrap(),
            NormalizedGeo { x: 0.0, y: 0.0 }
        );
        assert_eq!(
            normalize(45.0, -90.0).unwrap(),
            NormalizedGeo { x: 0.5, y: -0.5 }
        );
        assert_eq!(
            normalize(90.0, 180.0).unwrap(),
            NormalizedGeo { x: 1.0, y: -1.0 }
        );
    }

    #[test]
    fn rejects_bad_coordinates() {
        for (lat, lon) in [
            (91.0, 0.0),
            (-90.5, 0.0),
            (0.0, 180.1),
            (0.0, -181.0),
            (f64::NAN, 0.0),
            (0.0, f64::INFINITY),
        ] {
            assert!(matches!(
                GeoPoint::new(lat, lon),
                Err(Error::InvalidCoordinate { .. })
            ));
        }
    }

    #[test]
    fn haversine_closed_forms() {
        let origin = gp(0.0, 0.0);
        assert_eq!(haversine_miles(origin, origin), 0.0);
        let half = haversine_miles(origin, gp(0.0, 180.0));
        assert!((half - PI * EARTH_RADIUS_MILES).abs() < 1e-9);
        assert!((half - 12436.8154).abs() < 1e-3);
        let quarter = haversine_miles(origin, gp(0.0, 90.0));
        assert!((quarter - PI / 2.0 * EARTH_RADIUS_MILES).abs() < 1e-9);
        assert!((quarter - 6218.4077).abs() < 1e-3);
    }

    #[test]
    fn build_index_edge_cases() {
        let empty = SpatialIndex::build(&[], 1.0).unwrap();
        assert_eq!(empty.cell_count(), 0);
        assert!(empty
            .radius_query(gp(10.0, 10.0), 1000.0)
            .unwrap()
            .is_empty());

        let one = SpatialIndex::build(&[(7, gp(12.5, -40.2))], 5.0).unwrap();
        assert_eq!(one.cell_count(), 1);
        let (_, ids) = one.cells().next().unwrap();
        assert_eq!(ids, &vec![7]);

        assert!(matches!(
            SpatialIndex::build(&[(1, gp(0.0, 0.0)), (1, gp(1.0, 1.0))], 1.0),
            Err(Error::DuplicateId(1))
        ));
        assert!(SpatialIndex::build(&[], 0.0).is_err());
    }

    #[test]
    fn query_includes_center_and_rejects_negative_radius() {
        let pts = vec![
            (3, gp(40.0, -100.0)),
            (1, gp(40.0, -100.0)),
            (2, gp(41.0, -100.0)),
        ];
        let index = SpatialIndex::build(&pts, 2.0).unwrap();
        assert_eq!(
            index.radius_query(gp(40.0, -100.0), 0.0).unwrap(),
            vec![1, 3]
        );
        assert_eq!(
            index.radius_query(gp(40.0, -100.0), 100.0).unwrap(),
            vec![1, 2, 3]
        );
        assert!(index.radius_query(gp(0.0, 0.0), -1.0).is_err());
    }

    #[test]
    fn query_across_antimeridian_and_poles() {
        let pts = vec![
            (0, gp(0.0, 179.9)),
            (1, gp(0.0, -179.9)),
            (2, gp(89.9, 0.0)),
            (3, gp(89.9, 180.0)),
            (4, gp(-89.95, 45.0)),
        ];
        let index = SpatialIndex::build(&pts, 1.0).unwrap();
        assert_eq!(
            index.radius_query(gp(0.0, 180.0), 20.0).unwrap(),
            vec![0, 1]
        );
        assert_eq!(index.radius_query(gp(90.0, 0.0), 10.0).unwrap(), vec![2, 3]);
        assert_eq!(index.radius_query(gp(-90.0, 0.0), 10.0).unwrap(), vec![4]);
    }

    #[test]
    fn index_matches_brute_force_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(u64, GeoPoint)> = (0..2000)
            .map(|i| {
                let lat = rng.random_range(-90.0..=90.0);
                let lon = rng.random_range(-180.0..180.0);
                (i as u64 * 3, gp(lat, lon))
            })
            .collect();
        for cell in [0.5, 3.0, 45.0] {
            let index = SpatialIndex::build(&pts, cell).unwrap();
            for _ in 0..200 {
                let center = gp(
                    rng.random_range(-90.0..=90.0),
                    rng.random_range(-180.0..180.0),
                );
                let theta = 10f64.powf(rng.random_range(0.0..4.2));
                assert_eq!(
                    index.radius_query(center, theta).unwrap(),
                    brute_force_radius(&pts, center, theta)
                );
            }
        }
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_triangle(
            a in (-90.0f64..=90.0, -180.0f64..180.0),
            b in (-90.0f64..=90.0, -180.0f64..180.0),
            c in (-90.0f64..=90.0, -180.0f64..180.0),
        ) {
            let (a, b, c) = (gp(a.0, a.1), gp(b.0, b.1), gp(c.0, c.1));
            let ab = haversine_miles(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, haversine_miles(b, a));
            let ac = haversine_miles(a, c);
            let cb = haversine_miles(c, b);
            prop_assert!(ab <= (ac + cb) * (1.0 + 1e-9) + 1e-9);
        }

        #[test]
        fn normalize_round_trip(lat in -90.0f64..=90.0, lon in -180.0f64..180.0) {
            let p = gp(lat, lon);
            let n = p.normalize();
            prop_assert!((-1.0..=1.0).contains(&n.x));
            prop_assert!((-1.0..1.0).contains(&n.y));
            let back = n.to_geo_point().unwrap();
            // scaling by 1/90 is not injective on doubles, so allow one ulp
            prop_assert!((back.lat_deg() - lat).abs() <= lat.abs() * f64::EPSILON);
            prop_assert!((back.lon_deg() - lon).abs() <= lon.abs() * f64::EPSILON);
        }

        #[test]
        fn zero_radius_returns_only_coincident(lat in -80.0f64..80.0, lon in -170.0f64..170.0) {
            let center = gp(lat, lon);
            let pts = vec![(0, center), (1, gp(lat + 0.001, lon)), (2, gp(lat, lon - 0.001))];
            let index = SpatialIndex::build(&pts, 1.0).unwrap();
            prop_assert_eq!(index.radius_query(center, 0.0).unwrap(), vec![0]);
        }
    }
}
