//! Geolocation vectors.
//!
//! A language is placed on the globe by a single coordinate. That coordinate is
//! turned into a fixed-length vector whose `i`-th entry is the great-circle
//! distance to the `i`-th point of a spherical Fibonacci lattice, divided by
//! `π`. Entries are therefore in `[0, 1]`: `0` at a reference point, `1` at its
//! antipode.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of reference points.
pub const STANDARD_LATTICE_SIZE: usize = 299;

/// A point on the globe in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCoordinate")]
pub struct GeoCoordinate {
    latitude_deg: f64,
    longitude_deg: f64,
}

#[derive(Deserialize)]
struct RawCoordinate {
    latitude_deg: f64,
    longitude_deg: f64,
}

impl TryFrom<RawCoordinate> for GeoCoordinate {
    type Error = Error;

    fn try_from(r: RawCoordinate) -> Result<Self> {
        Self::new(r.latitude_deg, r.longitude_deg)
    }
}

impl GeoCoordinate {
    /// Latitude must be in `[-90, 90]` and longitude in `(-180, 180]`.
    pub fn new(latitude_deg: f64, longitude_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude_deg) {
            return Err(Error::InvalidArgument(format!(
                "latitude {latitude_deg} outside [-90, 90]"
            )));
        }
        if !(longitude_deg > -180.0 && longitude_deg <= 180.0) {
            return Err(Error::InvalidArgument(format!(
                "longitude {longitude_deg} outside (-180, 180]"
            )));
        }
        Ok(Self {
            latitude_deg,
            longitude_deg,
        })
    }

    pub fn latitude_deg(&self) -> f64 {
        self.latitude_deg
    }

    pub fn longitude_deg(&self) -> f64 {
        self.longitude_deg
    }

    /// Unit vector in Earth-centred coordinates (x towards 0°N 0°E, z north).
    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (lat, lon) = (self.latitude_deg.to_radians(), self.longitude_deg.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }

    /// Inverse of [`GeoCoordinate::to_unit_vector`]. The input need not be
    /// normalized but must be non-zero.
    pub fn from_unit_vector(p: [f64; 3]) -> Self {
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let z = (p[2] / norm).clamp(-1.0, 1.0);
        let latitude_deg = z.asin().to_degrees();
        let mut longitude_deg = p[1].atan2(p[0]).to_degrees();
        if longitude_deg <= -180.0 {
            longitude_deg += 360.0;
        }
        Self {
            latitude_deg,
            longitude_deg,
        }
    }
}

/// Reference points on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLattice {
    points: Vec<[f64; 3]>,
}

impl ReferenceLattice {
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Smallest angular separation between any two points, in radians.
    pub fn min_pairwise_angle(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                best = best.min(dot.clamp(-1.0, 1.0).acos());
            }
        }
        best
    }
}

/// Offset spherical Fibonacci lattice: point `i` sits at height
/// `z = 1 - (2i + 1) / count` and azimuth `i` times the golden angle.
pub fn fibonacci_lattice(count: usize) -> Result<ReferenceLattice> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "lattice needs at least one point".into(),
        ));
    }
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    let n = count as f64;
    let points = (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * golden_angle;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    Ok(ReferenceLattice { points })
}

/// Central angle between two points in radians, via the haversine formula.
pub fn great_circle_distance(a: &GeoCoordinate, b: &GeoCoordinate) -> f64 {
    haversine(
        a.latitude_deg.to_radians(),
        a.longitude_deg.to_radians(),
        b.latitude_deg.to_radians(),
        b.longitude_deg.to_radians(),
    )
}

fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let s_lat = ((lat2 - lat1) * 0.5).sin();
    let s_lon = ((lon2 - lon1) * 0.5).sin();
    let h = (s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon).clamp(0.0, 1.0);
    (2.0 * h.sqrt().asin()).clamp(0.0, PI)
}

/// Normalized distances from one coordinate to every lattice point.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoVector {
    values: Vec<f64>,
}

impl GeoVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Wraps raw values, checking the `[0, 1]` range.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "geolocation value {v} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }
}

pub fn geo_vector(coord: &GeoCoordinate, lattice: &ReferenceLattice) -> GeoVector {
    let lat = coord.latitude_deg.to_radians();
    let lon = coord.longitude_deg.to_radians();
    let values = lattice
        .points
        .iter()
        .map(|p| {
            let (plat, plon) = (p[2].clamp(-1.0, 1.0).asin(), p[1].atan2(p[0]));
            (haversine(lat, lon, plat, plon) / PI).clamp(0.0, 1.0)
        })
        .collect();
    GeoVector { values }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageGeoEntry {
    pub code: String,
    pub coordinate: GeoCoordinate,
    pub vector: GeoVector,
}

/// Language code to coordinate and precomputed vector. Iteration order is the
/// insertion order, which doubles as the class index order.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageGeoTable {
    entries: Vec<LanguageGeoEntry>,
    index: HashMap<String, usize>,
    lattice: ReferenceLattice,
}

impl LanguageGeoTable {
    pub fn new(lattice: ReferenceLattice) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            lattice,
        }
    }

    /// Builds a table from `(code, coordinate)` pairs.
    pub fn from_coordinates<'a, I>(lattice: ReferenceLattice, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, GeoCoordinate)>,
    {
        let mut table = Self::new(lattice);
        for (i, (code, coord)) in items.into_iter().enumerate() {
            table.insert(code, coord, i + 1)?;
        }
        Ok(table)
    }

    fn insert(&mut self, code: &str, coordinate: GeoCoordinate, line: usize) -> Result<()> {
        if self.index.contains_key(code) {
            return Err(Error::DuplicateKey {
                key: code.to_string(),
                line,
            });
        }
        let vector = geo_vector(&coordinate, &self.lattice);
        self.index.insert(code.to_string(), self.entries.len());
        self.entries.push(LanguageGeoEntry {
            code: code.to_string(),
            coordinate,
            vector,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lattice(&self) -> &ReferenceLattice {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.lattice.count()
    }

    pub fn entries(&self) -> &[LanguageGeoEntry] {
        &self.entries
    }

    pub fn get(&self, code: &str) -> Option<&LanguageGeoEntry> {
        self.index.get(code).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.code.as_str())
    }

    /// Serializes to the `code,lat,lon` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# code,lat,lon\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{}",
                e.code,
                e.coordinate.latitude_deg(),
                e.coordinate.longitude_deg()
            );
        }
        out
    }
}

/// Parses the `code,lat,lon` format. Lines starting with `#` and blank lines
/// are skipped.
pub fn parse_language_geolocations(
    text: &str,
    path: &Path,
    lattice: ReferenceLattice,
) -> Result<LanguageGeoTable> {
    let mut table = LanguageGeoTable::new(lattice);
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected `code,lat,lon`, found {} fields",
                fields.len()
            )));
        }
        if fields[0].is_empty() {
            return Err(parse_err("empty language code".into()));
        }
        let lat: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad latitude `{}`", fields[1])))?;
        let lon: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad longitude `{}`", fields[2])))?;
        let coord = GeoCoordinate::new(lat, lon).map_err(|e| parse_err(e.to_string()))?;
        table.insert(fields[0], coord, line_no)?;
    }
    Ok(table)
}

pub fn load_language_geolocations(
    path: impl AsRef<Path>,
    lattice: ReferenceLattice,
) -> Result<LanguageGeoTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_language_geolocations(&text, path, lattice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn coord(lat: f64, lon: f64) -> GeoCoordinate {
        GeoCoordinate::new(lat, lon).unwrap()
    }

    // Independent oracle: arccos of the dot product of 3-D unit vectors.
    fn dot_oracle(a: &GeoCoordinate, b: &GeoCoordinate) -> f64 {
        let (p, q) = (a.to_unit_vector(), b.to_unit_vector());
        (p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn coordinate_ranges() {
        assert!(GeoCoordinate::new(90.0, 180.0).is_ok());
        assert!(GeoCoordinate::new(-90.0, -179.999).is_ok());
        assert!(GeoCoordinate::new(90.5, 0.0).is_err());
        assert!(GeoCoordinate::new(0.0, -180.0).is_err());
        assert!(GeoCoordinate::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn single_point_lattice() {
        let l = fibonacci_lattice(1).unwrap();
        assert_eq!(l.points(), &[[1.0, 0.0, 0.0]]);
        assert!(fibonacci_lattice(0).is_err());
    }

    #[test]
    fn standard_lattice_is_unit_and_uniform() {
        let l = fibonacci_lattice(STANDARD_LATTICE_SIZE).unwrap();
        assert_eq!(l.count(), 299);
        for p in l.points() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
        let spacing = (4.0 * PI / 299.0).sqrt();
        let min = l.min_pairwise_angle();
        assert!(min > 0.5 * spacing && min < 2.0 * spacing, "min {min} spacing {spacing}");
        assert_eq!(l, fibonacci_lattice(299).unwrap());
    }

    #[test]
    fn special_distances() {
        assert_eq!(great_circle_distance(&coord(12.0, 34.0), &coord(12.0, 34.0)), 0.0);
        assert_eq!(great_circle_distance(&coord(0.0, 0.0), &coord(0.0, 180.0)), PI);
        assert_eq!(great_circle_distance(&coord(90.0, 0.0), &coord(-90.0, 0.0)), PI);
    }

    #[test]
    fn vector_at_and_opposite_lattice_point() {
        let l = fibonacci_lattice(8).unwrap();
        let p = l.points()[3];
        let at = GeoCoordinate::from_unit_vector(p);
        let anti = GeoCoordinate::from_unit_vector([-p[0], -p[1], -p[2]]);
        assert!(geo_vector(&at, &l).values()[3] < 1e-7);
        assert!(geo_vector(&anti, &l).values()[3] > 1.0 - 1e-7);

        let pole = fibonacci_lattice(1).unwrap();
        assert_eq!(geo_vector(&coord(0.0, 0.0), &pole).values(), &[0.0]);
        assert_eq!(geo_vector(&coord(0.0, 180.0), &pole).values(), &[1.0]);
    }

    #[test]
    fn four_point_vector_matches_brute_force_haversine() {
        let l = fibonacci_lattice(4).unwrap();
        let v = geo_vector(&coord(0.0, 0.0), &l);
        assert_eq!(v.len(), 4);
        for (i, p) in l.points().iter().enumerate() {
            // Written out longhand from the point's own latitude and longitude.
            let lat2 = p[2].asin();
            let lon2 = p[1].atan2(p[0]);
            let a = (lat2 / 2.0).sin().powi(2) + lat2.cos() * (lon2 / 2.0).sin().powi(2);
            let expected = 2.0 * a.sqrt().asin() / PI;
            assert!((v.values()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn parses_table_text() {
        let l = fibonacci_lattice(6).unwrap();
        let text = "# comment\neng, 51.5, -0.1\n\nfra,48.8,2.3\n";
        let t = parse_language_geolocations(text, Path::new("x"), l.clone()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.index_of("fra"), Some(1));
        let e = t.get("eng").unwrap();
        assert_eq!(e.vector, geo_vector(&e.coordinate, &l));

        let err = parse_language_geolocations("eng, 95.0, 0.0", Path::new("x"), l.clone());
        assert!(matches!(err, Err(Error::Parse { line: 1, .. })));
        let err = parse_language_geolocations("a,0,0\n#c\na,1,1", Path::new("x"), l.clone());
        assert!(matches!(err, Err(Error::DuplicateKey { line: 3, .. })));
        let err = parse_language_geolocations("a,0", Path::new("x"), l.clone());
        assert!(matches!(err, Err(Error::Parse { .. })));

        let back = parse_language_geolocations(&t.to_text(), Path::new("x"), l).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_language_geolocations("/nonexistent/langs.csv", fibonacci_lattice(3).unwrap());
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    fn any_coord() -> impl Strategy<Value = GeoCoordinate> {
        (-90.0f64..=90.0, -179.999f64..=180.0).prop_map(|(a, b)| coord(a, b))
    }

    proptest! {
        #[test]
        fn distance_matches_dot_oracle(a in any_coord(), b in any_coord()) {
            let d = great_circle_distance(&a, &b);
            prop_assert!((0.0..=PI).contains(&d));
            prop_assert!((d - dot_oracle(&a, &b)).abs() < 1e-9);
            prop_assert_eq!(d, great_circle_distance(&b, &a));
        }

        #[test]
        fn vector_values_in_unit_interval(c in any_coord(), n in 1usize..400) {
            let l = fibonacci_lattice(n).unwrap();
            let v = geo_vector(&c, &l);
            prop_assert_eq!(v.len(), n);
            prop_assert!(v.values().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn vector_is_lipschitz(lat in -89.0f64..89.0, lon in -179.0f64..179.0, eps in 0.0f64..0.5, axis in 0usize..2) {
            let l = fibonacci_lattice(37).unwrap();
            let a = coord(lat, lon);
            let b = if axis == 0 { coord(lat + eps, lon) } else { coord(lat, lon + eps) };
            let (va, vb) = (geo_vector(&a, &l), geo_vector(&b, &l));
            let bound = eps * PI / 180.0 / PI + 1e-9;
            for (x, y) in va.values().iter().zip(vb.values()) {
                prop_assert!((x - y).abs() <= bound);
            }
        }
    }
}
