//! Home location as the dominant mode of duration-weighted nighttime staypoints.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{weighted_centroid, GeoPoint, LguRegistry, LocalPlane};
use crate::trajectory::NightStaypoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftParams {
    pub bandwidth_m: f64,
    pub tol_m: f64,
    pub max_iter: usize,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        MeanShiftParams {
            bandwidth_m: 100.0,
            tol_m: 0.01,
            max_iter: 500,
        }
    }
}

/// A density mode and the points that climbed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub center: GeoPoint,
    pub mass: f64,
    pub members: Vec<usize>,
}

/// Weighted Gaussian-kernel mean-shift in a local plane centred on the
/// weighted centroid of the input.
///
/// Every point ascends the kernel density estimate until its shift drops
/// below `tol_m` (or `max_iter` is hit). Converged positions are grouped in
/// input order: a position joins the first mode whose seed lies within
/// `bandwidth_m / 2`, otherwise it seeds a new mode. A mode's centre is the
/// weight-averaged converged position of its members.
pub fn mean_shift(points: &[GeoPoint], weights: &[f64], params: MeanShiftParams) -> Result<Vec<Mode>> {
    if points.is_empty() {
        return Err(Error::NoNighttimeStaypoints);
    }
    if points.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput(format!("weights must be positive, got {w}")));
    }
    if !(params.bandwidth_m > 0.0) || !params.bandwidth_m.is_finite() {
        return Err(Error::config(
            "bandwidth_m",
            format!("must be positive, got {}", params.bandwidth_m),
        ));
    }

    let origin = weighted_centroid(points, weights).expect("non-empty with positive weights");
    let plane = LocalPlane::new(origin);
    let xy: Vec<(f64, f64)> = points.iter().map(|p| plane.project(p)).collect();
    let inv_two_h2 = 1.0 / (2.0 * params.bandwidth_m * params.bandwidth_m);

    let converged: Vec<(f64, f64)> = xy
        .iter()
        .map(|&start| {
            let mut cur = start;
            for _ in 0..params.max_iter {
                let (mut nx, mut ny, mut den) = (0.0, 0.0, 0.0);
                for (&(px, py), &w) in xy.iter().zip(weights) {
                    let d2 = (px - cur.0).powi(2) + (py - cur.1).powi(2);
                    let k = w * (-d2 * inv_two_h2).exp();
                    nx += k * px;
                    ny += k * py;
                    den += k;
                }
                if den <= 0.0 {
                    break;
                }
                let next = (nx / den, ny / den);
                let shift = ((next.0 - cur.0).powi(2) + (next.1 - cur.1).powi(2)).sqrt();
                cur = next;
                if shift < params.tol_m {
                    break;
                }
            }
            cur
        })
        .collect();

    struct Acc {
        seed: (f64, f64),
        sx: f64,
        sy: f64,
        mass: f64,
        members: Vec<usize>,
    }
    let merge_r2 = (params.bandwidth_m / 2.0).powi(2);
    let mut accs: Vec<Acc> = Vec::new();
    for (i, (&c, &w)) in converged.iter().zip(weights).enumerate() {
        let slot = accs
            .iter_mut()
            .find(|a| (a.seed.0 - c.0).powi(2) + (a.seed.1 - c.1).powi(2) <= merge_r2);
        match slot {
            Some(a) => {
                a.sx += w * c.0;
                a.sy += w * c.1;
                a.mass += w;
                a.members.push(i);
            }
            None => accs.push(Acc {
                seed: c,
                sx: w * c.0,
                sy: w * c.1,
                mass: w,
                members: vec![i],
            }),
        }
    }
    Ok(accs
        .into_iter()
        .map(|a| Mode {
            center: plane.unproject(a.sx / a.mass, a.sy / a.mass),
            mass: a.mass,
            members: a.members,
        })
        .collect())
}

/// Mode of maximal mass; equal masses resolve to the lexicographically
/// smallest `(lat, lon)`.
pub fn dominant_mode(modes: &[Mode]) -> Option<&Mode> {
    modes.iter().reduce(|best, m| {
        let better = m.mass > best.mass
            || (m.mass == best.mass && (m.center.lat, m.center.lon) < (best.center.lat, best.center.lon));
        if better {
            m
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeEstimate {
    pub user_id: String,
    pub home: GeoPoint,
    pub lgu_id: String,
    /// Night-split staypoint pieces (a staypoint spanning three nights counts three times).
    pub n_staypoints: usize,
    pub total_night_weight_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomeParams {
    pub mean_shift: MeanShiftParams,
    pub min_nights: usize,
}

impl Default for HomeParams {
    fn default() -> Self {
        HomeParams {
            mean_shift: MeanShiftParams::default(),
            min_nights: 5,
        }
    }
}

/// Home of one user from their pre-event nighttime staypoints.
pub fn estimate_home(
    user_id: &str,
    night_sps: &[NightStaypoint],
    params: HomeParams,
    registry: &LguRegistry,
) -> Result<HomeEstimate> {
    if night_sps.is_empty() {
        return Err(Error::NoNighttimeStaypoints);
    }
    let nights: BTreeSet<_> = night_sps
        .iter()
        .flat_map(|s| s.nights.iter().map(|(d, _)| *d))
        .collect();
    if nights.len() < params.min_nights.max(1) {
        return Err(Error::InsufficientObservation {
            nights: nights.len(),
            required: params.min_nights.max(1),
        });
    }
    let points: Vec<GeoPoint> = night_sps.iter().map(|s| s.staypoint.center).collect();
    let weights: Vec<f64> = night_sps.iter().map(|s| s.weight_s).collect();
    let modes = mean_shift(&points, &weights, params.mean_shift)?;
    let home = dominant_mode(&modes).expect("at least one mode").center;
    let lgu_id = registry.assign(&home)?.to_string();
    Ok(HomeEstimate {
        user_id: user_id.to_string(),
        home,
        lgu_id,
        n_staypoints: night_sps.iter().map(|s| s.nights.len()).sum(),
        total_night_weight_s: weights.iter().sum(),
    })
}

pub const HOMES_HEADER: [&str; 6] = [
    "user_id",
    "home_lat",
    "home_lon",
    "lgu_id",
    "n_staypoints",
    "total_night_weight_s",
];

pub fn write_homes_csv<W: Write>(writer: W, homes: &BTreeMap<String, HomeEstimate>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HOMES_HEADER)?;
    for h in homes.values() {
        w.write_record([
            h.user_id.as_str(),
            &h.home.lat.to_string(),
            &h.home.lon.to_string(),
            h.lgu_id.as_str(),
            &h.n_staypoints.to_string(),
            &h.total_night_weight_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_homes_csv<R: Read>(reader: R) -> Result<BTreeMap<String, HomeEstimate>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    if !rdr.headers()?.iter().eq(HOMES_HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "homes.csv header must be `{}`",
            HOMES_HEADER.join(",")
        )));
    }
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse()
                .map_err(|_| Error::Format(format!("homes.csv: bad number `{}`", &row[k])))
        };
        let h = HomeEstimate {
            user_id: row[0].to_string(),
            home: GeoPoint::new(num(1)?, num(2)?)?,
            lgu_id: row[3].to_string(),
            n_staypoints: row[4]
                .parse()
                .map_err(|_| Error::Format(format!("homes.csv: bad count `{}`", &row[4])))?,
            total_night_weight_s: num(5)?,
        };
        out.insert(h.user_id.clone(), h);
    }
    Ok(out)
}
