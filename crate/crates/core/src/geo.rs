//! Geodesic primitives, grid indexing and LGU (municipality) assignment.
//!
//! The Earth is treated as a sphere of radius [`EARTH_RADIUS_M`]. Local
//! computations (grids, mean-shift, centroids) use an equirectangular
//! projection about a reference point, which is accurate to well under a
//! metre at city scale.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite coordinate ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidInput(format!("coordinate out of range ({lat}, {lon})")));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn is_valid(&self) -> bool {
        GeoPoint::new(self.lat, self.lon).is_ok()
    }

    /// Point reached by travelling `distance_m` along the great circle with
    /// initial bearing `bearing_rad` (clockwise from north).
    pub fn destination(&self, bearing_rad: f64, distance_m: f64) -> GeoPoint {
        let delta = distance_m / EARTH_RADIUS_M;
        let (phi1, lambda1) = (self.lat.to_radians(), self.lon.to_radians());
        let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * bearing_rad.cos();
        let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
        let lambda2 =
            lambda1 + (bearing_rad.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
        let lon = (lambda2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
        GeoPoint {
            lat: phi2.to_degrees(),
            lon,
        }
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Great-circle distance in metres.
///
/// Exactly symmetric: the endpoints are put in a canonical order before the
/// formula is evaluated, so `haversine_m(a, b) == haversine_m(b, a)` bit for bit.
pub fn haversine_m(p1: &GeoPoint, p2: &GeoPoint) -> Result<f64> {
    if !p1.lat.is_finite() || !p1.lon.is_finite() || !p2.lat.is_finite() || !p2.lon.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite coordinate in distance computation".into(),
        ));
    }
    Ok(haversine_unchecked(p1, p2))
}

/// [`haversine_m`] for points already known to be finite.
pub fn haversine_unchecked(p1: &GeoPoint, p2: &GeoPoint) -> f64 {
    let (a, b) = if (p1.lat, p1.lon) <= (p2.lat, p2.lon) {
        (p1, p2)
    } else {
        (p2, p1)
    };
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Local equirectangular projection about a reference point; x east, y north, metres.
#[derive(Debug, Clone, Copy)]
pub struct LocalPlane {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalPlane {
    pub fn new(origin: GeoPoint) -> Self {
        LocalPlane {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn project(&self, p: &GeoPoint) -> (f64, f64) {
        let x = (p.lon - self.origin.lon).to_radians() * EARTH_RADIUS_M * self.cos_lat;
        let y = (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    pub fn unproject(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + (y / EARTH_RADIUS_M).to_degrees(),
            lon: self.origin.lon + (x / (EARTH_RADIUS_M * self.cos_lat)).to_degrees(),
        }
    }
}

/// Time- or mass-weighted centroid computed in a local plane around the first point.
pub fn weighted_centroid(points: &[GeoPoint], weights: &[f64]) -> Option<GeoPoint> {
    let first = points.first()?;
    let plane = LocalPlane::new(*first);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sw = 0.0;
    for (p, &w) in points.iter().zip(weights) {
        let (x, y) = plane.project(p);
        sx += w * x;
        sy += w * y;
        sw += w;
    }
    if sw <= 0.0 {
        return None;
    }
    Some(plane.unproject(sx / sw, sy / sw))
}

/// Square grid cell index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub x: i64,
    pub y: i64,
}

/// A square grid laid on a local plane about `origin`.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub cell_size_m: f64,
    pub origin: GeoPoint,
    plane: LocalPlane,
}

impl GridSpec {
    pub fn new(cell_size_m: f64, origin: GeoPoint) -> Result<Self> {
        if !(cell_size_m > 0.0) || !cell_size_m.is_finite() {
            return Err(Error::config(
                "cell_size_m",
                format!("must be positive, got {cell_size_m}"),
            ));
        }
        Ok(GridSpec {
            cell_size_m,
            origin,
            plane: LocalPlane::new(origin),
        })
    }

    pub fn cell_of(&self, p: &GeoPoint) -> GridCell {
        let (x, y) = self.plane.project(p);
        GridCell {
            x: (x / self.cell_size_m).floor() as i64,
            y: (y / self.cell_size_m).floor() as i64,
        }
    }

    pub fn cell_center(&self, c: GridCell) -> GeoPoint {
        self.plane.unproject(
            (c.x as f64 + 0.5) * self.cell_size_m,
            (c.y as f64 + 0.5) * self.cell_size_m,
        )
    }

    pub fn same_as(&self, other: &GridSpec) -> bool {
        self.cell_size_m == other.cell_size_m && self.origin == other.origin
    }
}

pub fn grid_index(p: &GeoPoint, cell_size_m: f64, origin: &GeoPoint) -> Result<GridCell> {
    Ok(GridSpec::new(cell_size_m, *origin)?.cell_of(p))
}

/// Closed, simple polygon ring. Containment is tested in lon/lat space.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    ring: Vec<GeoPoint>,
}

impl Polygon {
    /// Builds a polygon from a ring. An open ring is closed; self-intersecting
    /// rings and rings with fewer than three distinct vertices are rejected.
    pub fn new(mut ring: Vec<GeoPoint>) -> Result<Self> {
        if ring.first() != ring.last() {
            if let Some(&first) = ring.first() {
                ring.push(first);
            }
        }
        if ring.len() < 4 {
            return Err(Error::InvalidInput("polygon needs at least three vertices".into()));
        }
        let poly = Polygon { ring };
        if poly.self_intersects() {
            return Err(Error::InvalidInput("polygon ring self-intersects".into()));
        }
        Ok(poly)
    }

    pub fn ring(&self) -> &[GeoPoint] {
        &self.ring
    }

    fn edges(&self) -> impl Iterator<Item = (GeoPoint, GeoPoint)> + '_ {
        self.ring.windows(2).map(|w| (w[0], w[1]))
    }

    fn self_intersects(&self) -> bool {
        let edges: Vec<_> = self.edges().collect();
        let n = edges.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(edges[i], edges[j]) {
                    return true;
                }
            }
        }
        false
    }

    /// Even-odd ray casting.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x_cross = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                if p.lon < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Parses `POLYGON((lon lat, lon lat, ...))`. Only the outer ring is used.
    pub fn from_wkt(wkt: &str) -> Result<Self> {
        let s = wkt.trim();
        let upper = s.to_ascii_uppercase();
        if !upper.starts_with("POLYGON") {
            return Err(Error::Format(format!("expected WKT POLYGON, got `{s}`")));
        }
        let body = s["POLYGON".len()..].trim();
        let open = body
            .find("((")
            .ok_or_else(|| Error::Format("WKT polygon missing `((`".into()))?;
        let rest = &body[open + 2..];
        let close = rest
            .find(')')
            .ok_or_else(|| Error::Format("WKT polygon missing `)`".into()))?;
        let mut ring = Vec::new();
        for pair in rest[..close].split(',') {
            let mut it = pair.split_whitespace();
            let (Some(lon), Some(lat), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Format(format!("bad WKT coordinate `{pair}`")));
            };
            let lon: f64 = lon
                .parse()
                .map_err(|_| Error::Format(format!("bad WKT longitude `{lon}`")))?;
            let lat: f64 = lat
                .parse()
                .map_err(|_| Error::Format(format!("bad WKT latitude `{lat}`")))?;
            ring.push(GeoPoint::new(lat, lon)?);
        }
        Polygon::new(ring)
    }

    pub fn to_wkt(&self) -> String {
        let coords: Vec<String> = self.ring.iter().map(|p| format!("{} {}", p.lon, p.lat)).collect();
        format!("POLYGON(({}))", coords.join(", "))
    }
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon) && p.lon <= a.lon.max(b.lon) && p.lat >= a.lat.min(b.lat) && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect(s1: (GeoPoint, GeoPoint), s2: (GeoPoint, GeoPoint)) -> bool {
    let (p1, p2) = s1;
    let (p3, p4) = s2;
    let d1 = orient(p3, p4, p1);
    let d2 = orient(p3, p4, p2);
    let d3 = orient(p1, p2, p3);
    let d4 = orient(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p3, p4, p1))
        || (d2 == 0.0 && on_segment(p3, p4, p2))
        || (d3 == 0.0 && on_segment(p1, p2, p3))
        || (d4 == 0.0 && on_segment(p1, p2, p4))
}

/// A local government unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LguRecord {
    pub lgu_id: String,
    pub name: String,
    pub centroid: GeoPoint,
    pub boundary: Option<Polygon>,
}

/// LGUs keyed by unique id, kept in ascending id order.
#[derive(Debug, Clone, Default)]
pub struct LguRegistry {
    records: Vec<LguRecord>,
}

impl LguRegistry {
    pub fn new(mut records: Vec<LguRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.lgu_id.cmp(&b.lgu_id));
        if let Some(w) = records.windows(2).find(|w| w[0].lgu_id == w[1].lgu_id) {
            return Err(Error::InvalidInput(format!("duplicate lgu_id `{}`", w[0].lgu_id)));
        }
        Ok(LguRegistry { records })
    }

    pub fn records(&self) -> &[LguRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, lgu_id: &str) -> Option<&LguRecord> {
        self.records
            .binary_search_by(|r| r.lgu_id.as_str().cmp(lgu_id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn assign(&self, p: &GeoPoint) -> Result<&str> {
        assign_lgu(p, &self.records)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["lgu_id", "name", "centroid_lat", "centroid_lon"];
        let ok = headers.len() >= 4
            && headers.iter().take(4).eq(expected.iter().copied())
            && (headers.len() == 4 || (headers.len() == 5 && &headers[4] == "boundary_wkt"));
        if !ok {
            return Err(Error::Format(format!(
                "lgu.csv header must be `lgu_id,name,centroid_lat,centroid_lon[,boundary_wkt]`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let field = |k: usize| row.get(k).unwrap_or("").trim();
            let parse = |k: usize| {
                field(k)
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("lgu.csv row {}: bad number `{}`", i + 1, field(k))))
            };
            let centroid = GeoPoint::new(parse(2)?, parse(3)?)?;
            let boundary = match row.get(4).map(str::trim) {
                Some(w) if !w.is_empty() => Some(Polygon::from_wkt(w)?),
                _ => None,
            };
            records.push(LguRecord {
                lgu_id: field(0).to_string(),
                name: field(1).to_string(),
                centroid,
                boundary,
            });
        }
        LguRegistry::new(records)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let with_boundary = self.records.iter().any(|r| r.boundary.is_some());
        let mut w = csv::Writer::from_writer(writer);
        if with_boundary {
            w.write_record(["lgu_id", "name", "centroid_lat", "centroid_lon", "boundary_wkt"])?;
        } else {
            w.write_record(["lgu_id", "name", "centroid_lat", "centroid_lon"])?;
        }
        for r in &self.records {
            let lat = r.centroid.lat.to_string();
            let lon = r.centroid.lon.to_string();
            if with_boundary {
                let wkt = r.boundary.as_ref().map(Polygon::to_wkt).unwrap_or_default();
                w.write_record([r.lgu_id.as_str(), r.name.as_str(), &lat, &lon, &wkt])?;
            } else {
                w.write_record([r.lgu_id.as_str(), r.name.as_str(), &lat, &lon])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Assigns a point to an LGU: polygon containment first (lowest id wins),
/// then the nearest centroid with ties going to the lowest id.
pub fn assign_lgu<'a>(p: &GeoPoint, registry: &'a [LguRecord]) -> Result<&'a str> {
    if registry.is_empty() {
        return Err(Error::Assignment("empty LGU registry".into()));
    }
    let mut by_id: Vec<&LguRecord> = registry.iter().collect();
    by_id.sort_by(|a, b| a.lgu_id.cmp(&b.lgu_id));

    if let Some(r) = by_id
        .iter()
        .find(|r| r.boundary.as_ref().is_some_and(|b| b.contains(p)))
    {
        return Ok(&r.lgu_id);
    }
    let mut best: Option<(&LguRecord, f64)> = None;
    for r in by_id {
        let d = haversine_m(p, &r.centroid)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((r, d));
        }
    }
    best.map(|(r, _)| r.lgu_id.as_str())
        .ok_or_else(|| Error::Assignment(format!("no LGU for {p}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gp(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    /// Spherical law of cosines, independent of the haversine route.
    fn cosine_law_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        EARTH_RADIUS_M * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn haversine_identity_and_antipode() {
        let a = gp(35.0, 135.0);
        assert_eq!(haversine_m(&a, &a).unwrap(), 0.0);
        let d = haversine_m(&gp(0.0, 0.0), &gp(0.0, 180.0)).unwrap();
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_M).abs() < 1e-6);
        assert!((d - 20_015_087.0).abs() < 1.0);
    }

    #[test]
    fn one_degree_of_longitude_at_35n() {
        let (a, b) = (gp(35.0, 135.0), gp(35.0, 136.0));
        let oracle = cosine_law_m(&a, &b);
        let d = haversine_m(&a, &b).unwrap();
        assert!((oracle - 91_000.0).abs() < 200.0, "oracle {oracle}");
        assert!((d - oracle).abs() < 1e-3 * oracle);
        assert!((d - 91_000.0).abs() < 200.0);
    }

    #[test]
    fn non_finite_is_input_error() {
        let bad = GeoPoint {
            lat: f64::NAN,
            lon: 0.0,
        };
        assert!(matches!(haversine_m(&bad, &gp(0.0, 0.0)), Err(Error::InvalidInput(_))));
        assert!(GeoPoint::new(91.0, 0.0).is_err());
    }

    #[test]
    fn grid_basics() {
        let o = gp(32.8, 130.7);
        assert_eq!(grid_index(&o, 1000.0, &o).unwrap(), GridCell { x: 0, y: 0 });
        let east = o.destination(std::f64::consts::FRAC_PI_2, 1500.0);
        assert_eq!(grid_index(&east, 1000.0, &o).unwrap().x, 1);
        assert!(matches!(grid_index(&o, 0.0, &o), Err(Error::Config { .. })));
        assert!(grid_index(&o, -1.0, &o).is_err());
    }

    #[test]
    fn destination_distance_roundtrip() {
        let o = gp(32.8, 130.7);
        for (b, d) in [(0.3, 500.0), (2.0, 12_345.0), (4.0, 250_000.0)] {
            let p = o.destination(b, d);
            let back = haversine_m(&o, &p).unwrap();
            assert!((back - d).abs() < 1e-6 * d + 1e-6, "{back} vs {d}");
        }
    }

    #[test]
    fn wkt_roundtrip_and_containment() {
        let poly = Polygon::from_wkt("POLYGON((130 32, 131 32, 131 33, 130 33, 130 32))").unwrap();
        assert!(poly.contains(&gp(32.5, 130.5)));
        assert!(!poly.contains(&gp(33.5, 130.5)));
        let again = Polygon::from_wkt(&poly.to_wkt()).unwrap();
        assert_eq!(poly, again);
    }

    #[test]
    fn bowtie_is_rejected() {
        let r = Polygon::from_wkt("POLYGON((0 0, 1 1, 1 0, 0 1, 0 0))");
        assert!(r.is_err());
    }

    #[test]
    fn assign_by_centroid_and_polygon() {
        let recs = vec![
            LguRecord {
                lgu_id: "B".into(),
                name: "b".into(),
                centroid: gp(33.0, 131.0),
                boundary: None,
            },
            LguRecord {
                lgu_id: "A".into(),
                name: "a".into(),
                centroid: gp(32.0, 130.0),
                boundary: None,
            },
        ];
        assert_eq!(assign_lgu(&gp(33.0, 131.0), &recs).unwrap(), "B");
        // equidistant point: lowest id wins
        let mid = gp(32.5, 130.5);
        let reg = LguRegistry::new(recs.clone()).unwrap();
        let a = haversine_m(&mid, &reg.get("A").unwrap().centroid).unwrap();
        let b = haversine_m(&mid, &reg.get("B").unwrap().centroid).unwrap();
        if a == b {
            assert_eq!(reg.assign(&mid).unwrap(), "A");
        }

        let mut with_poly = recs;
        with_poly[0].boundary = Some(Polygon::from_wkt("POLYGON((129 31, 129.5 31, 129.5 31.5, 129 31.5))").unwrap());
        // inside B's polygon even though A's centroid is nearer
        assert_eq!(assign_lgu(&gp(31.2, 129.2), &with_poly).unwrap(), "B");
        assert!(assign_lgu(&mid, &[]).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = LguRecord {
            lgu_id: "X".into(),
            name: "x".into(),
            centroid: gp(0.0, 0.0),
            boundary: None,
        };
        assert!(LguRegistry::new(vec![r.clone(), r]).is_err());
    }

    #[test]
    fn lgu_csv_roundtrip() {
        let text = "lgu_id,name,centroid_lat,centroid_lon,boundary_wkt\n\
                    K1,Kumamoto,32.8,130.7,\"POLYGON((130.6 32.7, 130.8 32.7, 130.8 32.9, 130.6 32.9, 130.6 32.7))\"\n\
                    K2,Mashiki,32.79,130.82,\n";
        let reg = LguRegistry::read_csv(text.as_bytes()).unwrap();
        assert_eq!(reg.len(), 2);
        assert!(reg.get("K1").unwrap().boundary.is_some());
        let mut out = Vec::new();
        reg.write_csv(&mut out).unwrap();
        let again = LguRegistry::read_csv(out.as_slice()).unwrap();
        assert_eq!(again.records(), reg.records());
        assert!(LguRegistry::read_csv("id,name\n".as_bytes()).is_err());
    }
}
