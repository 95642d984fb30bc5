//! GPS log ingest, per-user trajectories and staypoint extraction.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_unchecked, weighted_centroid, GeoPoint};

pub const GPS_HEADER: [&str; 4] = ["user_id", "t", "lat", "lon"];

const DAY_S: i64 = 86_400;
const NIGHT_START_S: i64 = 20 * 3600;
const NIGHT_LEN_S: i64 = 10 * 3600;

/// One row of `gps.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsRecord {
    pub user_id: String,
    pub t: i64,
    pub pos: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fix {
    pub t: i64,
    pub pos: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user_id: String,
    pub fixes: Vec<Fix>,
}

impl Trajectory {
    /// Builds a trajectory, sorting fixes by time (stable, so equal timestamps keep input order).
    pub fn new(user_id: impl Into<String>, mut fixes: Vec<Fix>) -> Self {
        fixes.sort_by_key(|f| f.t);
        Trajectory {
            user_id: user_id.into(),
            fixes,
        }
    }

    pub fn span(&self) -> Option<(i64, i64)> {
        Some((self.fixes.first()?.t, self.fixes.last()?.t))
    }
}

#[derive(Debug, Clone, Default)]
pub struct GpsLog {
    pub trajectories: BTreeMap<String, Trajectory>,
    pub rows: usize,
    pub skipped: usize,
}

impl GpsLog {
    pub fn span(&self) -> Option<(i64, i64)> {
        self.trajectories
            .values()
            .filter_map(Trajectory::span)
            .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
    }
}

fn parse_row(row: &csv::StringRecord) -> Option<GpsRecord> {
    if row.len() != 4 {
        return None;
    }
    let user_id = row[0].trim();
    if user_id.is_empty() {
        return None;
    }
    let t: i64 = row[1].trim().parse().ok()?;
    if t <= 0 {
        return None;
    }
    let lat: f64 = row[2].trim().parse().ok()?;
    let lon: f64 = row[3].trim().parse().ok()?;
    let pos = GeoPoint::new(lat, lon).ok()?;
    Some(GpsRecord {
        user_id: user_id.to_string(),
        t,
        pos,
    })
}

/// Reads `gps.csv` (`user_id,t,lat,lon`), grouping fixes per user in time order.
///
/// Lines starting with `#` are ignored. Malformed rows are skipped and counted;
/// if more than half the rows are malformed the whole file is rejected.
pub fn parse_gps_csv<R: Read>(reader: R) -> Result<GpsLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || !headers.iter().map(str::trim).eq(GPS_HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "missing gps.csv header `{}`",
            GPS_HEADER.join(",")
        )));
    }
    let mut per_user: BTreeMap<String, Vec<Fix>> = BTreeMap::new();
    let mut rows = 0usize;
    let mut skipped = 0usize;
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                rows += 1;
                match parse_row(&record) {
                    Some(r) => per_user.entry(r.user_id).or_default().push(Fix { t: r.t, pos: r.pos }),
                    None => skipped += 1,
                }
            }
            Err(e) if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) => {
                rows += 1;
                skipped += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if rows > 0 && skipped * 2 > rows {
        return Err(Error::DataQuality {
            malformed: skipped,
            total: rows,
        });
    }
    if skipped > 0 {
        log::warn!("gps.csv: skipped {skipped} of {rows} malformed rows");
    }
    let trajectories = per_user
        .into_iter()
        .map(|(u, fixes)| (u.clone(), Trajectory::new(u, fixes)))
        .collect();
    Ok(GpsLog {
        trajectories,
        rows,
        skipped,
    })
}

/// Writes trajectories as `gps.csv`, ascending by user then time.
pub fn write_gps_csv<'a, W, I>(writer: W, trajectories: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(GPS_HEADER)?;
    let mut trajs: Vec<&Trajectory> = trajectories.into_iter().collect();
    trajs.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    for traj in trajs {
        for f in &traj.fixes {
            w.write_record([
                traj.user_id.as_str(),
                &f.t.to_string(),
                &f.pos.lat.to_string(),
                &f.pos.lon.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A dwell episode summarised by its time-weighted centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Staypoint {
    pub center: GeoPoint,
    pub t_start: i64,
    pub t_end: i64,
    /// Index of the first member fix in the source trajectory.
    pub first_fix: usize,
    pub n_fixes: usize,
}

impl Staypoint {
    pub fn duration_s(&self) -> i64 {
        self.t_end - self.t_start
    }

    /// The same dwell restricted to `[from, to)`, or `None` if nothing is left.
    pub fn clipped(&self, from: i64, to: i64) -> Option<Staypoint> {
        let t_start = self.t_start.max(from);
        let t_end = self.t_end.min(to);
        (t_end > t_start).then_some(Staypoint {
            t_start,
            t_end,
            ..*self
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StaypointParams {
    pub dist_threshold_m: f64,
    pub min_duration_s: i64,
}

impl Default for StaypointParams {
    fn default() -> Self {
        StaypointParams {
            dist_threshold_m: 200.0,
            min_duration_s: 900,
        }
    }
}

impl StaypointParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dist_threshold_m > 0.0) || !self.dist_threshold_m.is_finite() {
            return Err(Error::config(
                "staypoint_dist_m",
                format!("must be positive, got {}", self.dist_threshold_m),
            ));
        }
        if self.min_duration_s <= 0 {
            return Err(Error::config(
                "staypoint_min_duration_s",
                format!("must be positive, got {}", self.min_duration_s),
            ));
        }
        Ok(())
    }
}

/// Sequential staypoint scan.
///
/// From an anchor fix the run grows while each new fix lies within
/// `dist_threshold_m` of every fix already in the run (the anchor included).
/// A run spanning at least `min_duration_s` becomes a staypoint and the scan
/// resumes after it; otherwise the anchor advances by one. Bounding the run's
/// diameter keeps every member within the threshold of the centroid.
pub fn extract_staypoints(traj: &Trajectory, params: StaypointParams) -> Result<Vec<Staypoint>> {
    params.validate()?;
    let fixes = &traj.fixes;
    let n = fixes.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n
            && fixes[i..j]
                .iter()
                .all(|m| haversine_unchecked(&m.pos, &fixes[j].pos) <= params.dist_threshold_m)
        {
            j += 1;
        }
        let span = fixes[j - 1].t - fixes[i].t;
        if span >= params.min_duration_s {
            out.push(summarise_run(&fixes[i..j], i));
            i = j;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// Each fix stands for half the gap to each neighbour inside the run.
fn summarise_run(run: &[Fix], first_fix: usize) -> Staypoint {
    let n = run.len();
    let weights: Vec<f64> = (0..n)
        .map(|k| {
            let prev = if k > 0 { run[k].t - run[k - 1].t } else { 0 };
            let next = if k + 1 < n { run[k + 1].t - run[k].t } else { 0 };
            (prev + next) as f64 / 2.0
        })
        .collect();
    let points: Vec<GeoPoint> = run.iter().map(|f| f.pos).collect();
    let center = weighted_centroid(&points, &weights)
        .or_else(|| weighted_centroid(&points, &vec![1.0; n]))
        .expect("run is non-empty");
    Staypoint {
        center,
        t_start: run[0].t,
        t_end: run[n - 1].t,
        first_fix,
        n_fixes: n,
    }
}

/// Staypoints for many users, computed in parallel and keyed by user.
pub fn extract_all(
    trajectories: &BTreeMap<String, Trajectory>,
    params: StaypointParams,
) -> Result<BTreeMap<String, Vec<Staypoint>>> {
    params.validate()?;
    let items: Vec<(&String, &Trajectory)> = trajectories.iter().collect();
    items
        .par_iter()
        .map(|(u, t)| extract_staypoints(t, params).map(|s| ((*u).clone(), s)))
        .collect()
}

/// Local wall-clock helper for a fixed UTC offset.
///
/// The night of local date `D` is the window `[D 20:00, D+1 06:00)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NightClock {
    pub tz_offset_s: i64,
}

impl Default for NightClock {
    fn default() -> Self {
        NightClock { tz_offset_s: 9 * 3600 }
    }
}

fn epoch_day_to_date(day: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).unwrap() + chrono::TimeDelta::days(day)
}

fn date_to_epoch_day(d: NaiveDate) -> i64 {
    (d - NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()).num_days()
}

impl NightClock {
    pub fn new(tz_offset_s: i64) -> Self {
        NightClock { tz_offset_s }
    }

    pub fn local_day(&self, t: i64) -> i64 {
        (t + self.tz_offset_s).div_euclid(DAY_S)
    }

    pub fn local_date(&self, t: i64) -> NaiveDate {
        epoch_day_to_date(self.local_day(t))
    }

    /// Seconds since local midnight.
    pub fn local_seconds(&self, t: i64) -> i64 {
        (t + self.tz_offset_s).rem_euclid(DAY_S)
    }

    /// Epoch second of local midnight starting `date`.
    pub fn local_midnight(&self, date: NaiveDate) -> i64 {
        date_to_epoch_day(date) * DAY_S - self.tz_offset_s
    }

    /// UTC bounds of the night that begins on local `date`.
    pub fn night_window(&self, date: NaiveDate) -> (i64, i64) {
        let start = self.local_midnight(date) + NIGHT_START_S;
        (start, start + NIGHT_LEN_S)
    }

    /// The night whose window contains `t`, if any.
    pub fn night_containing(&self, t: i64) -> Option<NaiveDate> {
        let secs = self.local_seconds(t);
        let day = self.local_date(t);
        if secs >= NIGHT_START_S {
            Some(day)
        } else if secs < NIGHT_START_S + NIGHT_LEN_S - DAY_S {
            day.pred_opt()
        } else {
            None
        }
    }

    /// First night whose window starts at or after `t`.
    pub fn first_night_after(&self, t: i64) -> NaiveDate {
        let d = self.local_date(t);
        if self.night_window(d).0 >= t {
            d
        } else {
            d.succ_opt().expect("date in range")
        }
    }

    /// Per-night overlap (seconds) of `[t_start, t_end)` with night windows.
    pub fn night_overlaps(&self, t_start: i64, t_end: i64) -> Vec<(NaiveDate, i64)> {
        if t_end <= t_start {
            return Vec::new();
        }
        let first = self.local_day(t_start) - 1;
        let last = self.local_day(t_end);
        (first..=last)
            .filter_map(|day| {
                let date = epoch_day_to_date(day);
                let (ws, we) = self.night_window(date);
                let ov = t_end.min(we) - t_start.max(ws);
                (ov > 0).then_some((date, ov))
            })
            .collect()
    }
}

/// A staypoint kept by the nighttime filter, weighted by its night overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct NightStaypoint {
    pub staypoint: Staypoint,
    pub weight_s: f64,
    pub nights: Vec<(NaiveDate, i64)>,
}

/// Keeps staypoints overlapping any 20:00–06:00 local window, reweighted to
/// the total overlap length.
pub fn nighttime_filter(sps: &[Staypoint], clock: NightClock) -> Vec<NightStaypoint> {
    sps.iter()
        .filter_map(|sp| {
            let nights = clock.night_overlaps(sp.t_start, sp.t_end);
            let total: i64 = nights.iter().map(|(_, s)| s).sum();
            (total > 0).then_some(NightStaypoint {
                staypoint: *sp,
                weight_s: total as f64,
                nights,
            })
        })
        .collect()
}
