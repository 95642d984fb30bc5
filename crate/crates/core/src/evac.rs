//! Evacuation detection against a distance threshold, per-LGU evacuation
//! rates and evacuation timing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geo::{haversine_unchecked, GeoPoint};
use crate::homeloc::{dominant_mode, mean_shift, HomeEstimate, MeanShiftParams};
use crate::trajectory::{NightClock, Staypoint};

/// Seismic intensity on the JMA scale, stored in tenths (1.0 ..= 7.0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Intensity(u8);

impl Intensity {
    pub const MIN_TENTHS: u8 = 10;
    pub const MAX_TENTHS: u8 = 70;

    /// Rounds to the nearest 0.1 and checks the scale range.
    pub fn from_value(z: f64) -> Result<Self> {
        if !z.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite intensity {z}")));
        }
        let tenths = (z * 10.0).round();
        if tenths < Self::MIN_TENTHS as f64 || tenths > Self::MAX_TENTHS as f64 {
            return Err(Error::InvalidInput(format!("intensity {z} outside [1.0, 7.0]")));
        }
        Ok(Intensity(tenths as u8))
    }

    pub fn from_tenths(tenths: u8) -> Result<Self> {
        Self::from_value(tenths as f64 / 10.0)
    }

    pub fn tenths(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 10.0
    }

    /// Lower edge of the 0.5-wide bin holding this intensity.
    pub fn half_bin(self) -> IntensityBin {
        IntensityBin(self.0 / 5 * 5)
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl Serialize for Intensity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Intensity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Intensity::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// A 0.5-wide intensity bin identified by its lower edge in tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntensityBin(pub u8);

impl IntensityBin {
    pub fn lower(self) -> f64 {
        self.0 as f64 / 10.0
    }
}

impl fmt::Display for IntensityBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvacRecord {
    pub user_id: String,
    pub lgu_id: String,
    pub evacuated: bool,
    pub distance_m: f64,
    pub first_night_away: Option<NaiveDate>,
    /// 1-based index of `first_night_away` counted from the first post-event night.
    pub nights_to_leave: Option<u32>,
}

/// Per-LGU triple feeding the pooled rate and the likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvacObservation {
    pub lgu_id: String,
    pub z: Intensity,
    pub m: u64,
    pub m_star: u64,
}

impl EvacObservation {
    pub fn new(lgu_id: impl Into<String>, z: Intensity, m: u64, m_star: u64) -> Result<Self> {
        if m_star > m {
            return Err(Error::InvalidInput(format!("M* = {m_star} exceeds M = {m}")));
        }
        Ok(EvacObservation {
            lgu_id: lgu_id.into(),
            z,
            m,
            m_star,
        })
    }

    pub fn rate(&self) -> Option<f64> {
        (self.m > 0).then(|| self.m_star as f64 / self.m as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvacParams {
    pub r_m: f64,
    pub window_days: u32,
    /// Kernel used to find the dominant post-event night location.
    pub mean_shift: MeanShiftParams,
}

impl Default for EvacParams {
    fn default() -> Self {
        EvacParams {
            r_m: 200.0,
            window_days: 7,
            mean_shift: MeanShiftParams::default(),
        }
    }
}

impl EvacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_m > 0.0) || !self.r_m.is_finite() {
            return Err(Error::config("r_m", format!("must be positive, got {}", self.r_m)));
        }
        if self.window_days == 0 {
            return Err(Error::config("window_days", "must be at least 1"));
        }
        Ok(())
    }
}

/// Centre and overlap of the staypoint covering most of the night of `date`.
/// Equal overlaps go to the earlier staypoint.
pub fn nightly_location(sps: &[Staypoint], date: NaiveDate, clock: NightClock) -> Result<(GeoPoint, i64)> {
    let (ws, we) = clock.night_window(date);
    let mut best: Option<(GeoPoint, i64)> = None;
    for sp in sps {
        let ov = sp.t_end.min(we) - sp.t_start.max(ws);
        if ov > 0 && best.is_none_or(|(_, b)| ov > b) {
            best = Some((sp.center, ov));
        }
    }
    best.ok_or(Error::NoObservation(date))
}

/// Decides whether a user evacuated over the first `window_days` nights
/// starting at or after `event_time`.
///
/// The per-night locations are clustered by mean-shift (weighted by night
/// overlap); the dominant cluster's distance from home decides.
pub fn detect_evacuation(
    home: &HomeEstimate,
    post_sps: &[Staypoint],
    event_time: i64,
    clock: NightClock,
    params: EvacParams,
) -> Result<EvacRecord> {
    params.validate()?;
    let post: Vec<Staypoint> = post_sps
        .iter()
        .filter_map(|s| s.clipped(event_time, i64::MAX))
        .collect();
    let first = clock.first_night_after(event_time);
    let mut nights: Vec<(u32, NaiveDate, GeoPoint, f64)> = Vec::new();
    let mut date = first;
    for k in 1..=params.window_days {
        match nightly_location(&post, date, clock) {
            Ok((loc, w)) => nights.push((k, date, loc, w as f64)),
            Err(Error::NoObservation(_)) => {}
            Err(e) => return Err(e),
        }
        date = date.succ_opt().expect("date in range");
    }
    if nights.is_empty() {
        return Err(Error::Undetermined);
    }
    let points: Vec<GeoPoint> = nights.iter().map(|n| n.2).collect();
    let weights: Vec<f64> = nights.iter().map(|n| n.3).collect();
    let modes = mean_shift(&points, &weights, params.mean_shift)?;
    let dominant = dominant_mode(&modes).expect("non-empty");
    let distance_m = haversine_unchecked(&home.home, &dominant.center);
    let evacuated = distance_m > params.r_m;

    let away = if evacuated {
        nights
            .iter()
            .find(|n| haversine_unchecked(&home.home, &n.2) > params.r_m)
            .or_else(|| dominant.members.iter().map(|&i| &nights[i]).min_by_key(|n| n.0))
            .map(|n| (n.1, n.0))
    } else {
        None
    };
    Ok(EvacRecord {
        user_id: home.user_id.clone(),
        lgu_id: home.lgu_id.clone(),
        evacuated,
        distance_m,
        first_night_away: away.map(|a| a.0),
        nights_to_leave: away.map(|a| a.1),
    })
}

/// Detection for every user with a home, in parallel. Users whose result is an
/// error (typically [`Error::Undetermined`]) are returned separately.
pub fn detect_all(
    homes: &BTreeMap<String, HomeEstimate>,
    staypoints: &BTreeMap<String, Vec<Staypoint>>,
    event_time: i64,
    clock: NightClock,
    params: EvacParams,
) -> Result<(BTreeMap<String, EvacRecord>, BTreeMap<String, String>)> {
    params.validate()?;
    let empty = Vec::new();
    let users: Vec<&HomeEstimate> = homes.values().collect();
    let results: Vec<(String, Result<EvacRecord>)> = users
        .par_iter()
        .map(|h| {
            let sps = staypoints.get(&h.user_id).unwrap_or(&empty);
            (h.user_id.clone(), detect_evacuation(h, sps, event_time, clock, params))
        })
        .collect();
    let mut ok = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for (u, r) in results {
        match r {
            Ok(rec) => {
                ok.insert(u, rec);
            }
            Err(e) => {
                excluded.insert(u, e.to_string());
            }
        }
    }
    Ok((ok, excluded))
}

/// Counts users and evacuees per LGU. LGUs lacking an intensity are listed
/// separately and left out.
pub fn aggregate_observations(
    records: &BTreeMap<String, EvacRecord>,
    intensity: &BTreeMap<String, Intensity>,
) -> (Vec<EvacObservation>, Vec<String>) {
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for r in records.values() {
        let c = counts.entry(r.lgu_id.as_str()).or_default();
        c.0 += 1;
        if r.evacuated {
            c.1 += 1;
        }
    }
    let mut obs = Vec::new();
    let mut missing = Vec::new();
    for (lgu, (m, m_star)) in counts {
        match intensity.get(lgu) {
            Some(&z) => obs.push(EvacObservation {
                lgu_id: lgu.to_string(),
                z,
                m,
                m_star,
            }),
            None => missing.push(lgu.to_string()),
        }
    }
    (obs, missing)
}

/// Pooled rate over every LGU at intensity `z`: ΣM* / ΣM.
pub fn evacuation_rate(obs: &[EvacObservation], z: f64) -> Result<f64> {
    let z = Intensity::from_value(z)?;
    let (m, m_star) = obs
        .iter()
        .filter(|o| o.z == z)
        .fold((0u64, 0u64), |(m, s), o| (m + o.m, s + o.m_star));
    if m == 0 {
        return Err(Error::NoDataAtIntensity(z.to_string()));
    }
    Ok(m_star as f64 / m as f64)
}

/// Pools observations sharing an intensity into one observation per intensity.
pub fn pool_by_intensity(obs: &[EvacObservation]) -> Vec<EvacObservation> {
    let mut pooled: BTreeMap<Intensity, (u64, u64)> = BTreeMap::new();
    for o in obs {
        let e = pooled.entry(o.z).or_default();
        e.0 += o.m;
        e.1 += o.m_star;
    }
    pooled
        .into_iter()
        .map(|(z, (m, m_star))| EvacObservation {
            lgu_id: format!("si{z}"),
            z,
            m,
            m_star,
        })
        .collect()
}

/// Normalised histogram of nights-to-leave; `masses[i]` covers nights
/// `1 + i*w ..= (i+1)*w`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingHistogram {
    pub bin_width_days: u32,
    pub masses: Vec<f64>,
    pub n: usize,
}

/// Evacuation timing per 0.5-wide intensity bin. Bins whose LGUs have no
/// evacuees get an empty histogram.
pub fn evacuation_timing_hist(
    records: &[EvacRecord],
    intensity_of: &BTreeMap<String, Intensity>,
    bin_width_days: u32,
) -> Result<BTreeMap<IntensityBin, TimingHistogram>> {
    if bin_width_days == 0 {
        return Err(Error::config("bin_width_days", "must be at least 1"));
    }
    let mut delays: BTreeMap<IntensityBin, Vec<u32>> = BTreeMap::new();
    for r in records {
        let Some(z) = intensity_of.get(&r.lgu_id) else {
            continue;
        };
        let e = delays.entry(z.half_bin()).or_default();
        if let (true, Some(d)) = (r.evacuated, r.nights_to_leave) {
            e.push(d);
        }
    }
    Ok(delays
        .into_iter()
        .map(|(bin, ds)| {
            let mut masses = Vec::new();
            for &d in &ds {
                let idx = ((d.max(1) - 1) / bin_width_days) as usize;
                if masses.len() <= idx {
                    masses.resize(idx + 1, 0.0);
                }
                masses[idx] += 1.0;
            }
            let n = ds.len();
            masses.iter_mut().for_each(|m| *m /= n as f64);
            (
                bin,
                TimingHistogram {
                    bin_width_days,
                    masses,
                    n,
                },
            )
        })
        .collect())
}

/// Mean nights-to-leave per intensity bin (evacuees only).
pub fn mean_delay_by_bin(
    records: &[EvacRecord],
    intensity_of: &BTreeMap<String, Intensity>,
) -> BTreeMap<IntensityBin, f64> {
    let mut acc: BTreeMap<IntensityBin, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let (true, Some(d), Some(z)) = (r.evacuated, r.nights_to_leave, intensity_of.get(&r.lgu_id)) {
            let e = acc.entry(z.half_bin()).or_default();
            e.0 += d as f64;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(b, (s, n))| (b, s / n as f64)).collect()
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str], name: &str) -> Result<()> {
    if !rdr.headers()?.iter().map(str::trim).eq(expected.iter().copied()) {
        return Err(Error::Format(format!("{name} header must be `{}`", expected.join(","))));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(s: &str, file: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{file}: bad value `{s}`")))
}

pub const INTENSITY_HEADER: [&str; 2] = ["lgu_id", "si"];

pub fn read_intensity_csv<R: Read>(reader: R) -> Result<BTreeMap<String, Intensity>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    check_header(&mut rdr, &INTENSITY_HEADER, "intensity.csv")?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let z = Intensity::from_value(parse_num(&row[1], "intensity.csv")?)?;
        if out.insert(row[0].trim().to_string(), z).is_some() {
            return Err(Error::Format(format!("intensity.csv: duplicate lgu_id `{}`", &row[0])));
        }
    }
    Ok(out)
}

pub fn write_intensity_csv<W: Write>(writer: W, map: &BTreeMap<String, Intensity>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(INTENSITY_HEADER)?;
    for (lgu, z) in map {
        w.write_record([lgu.as_str(), &z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const POPULATION_HEADER: [&str; 2] = ["lgu_id", "population"];

/// Resident population per LGU, the exposure for `predict`.
pub fn read_population_csv<R: Read>(reader: R) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    check_header(&mut rdr, &POPULATION_HEADER, "population.csv")?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let pop: f64 = parse_num(&row[1], "population.csv")?;
        if !(pop >= 0.0) || !pop.is_finite() {
            return Err(Error::Format(format!("population.csv: bad population `{}`", &row[1])));
        }
        if out.insert(row[0].trim().to_string(), pop).is_some() {
            return Err(Error::Format(format!("population.csv: duplicate lgu_id `{}`", &row[0])));
        }
    }
    Ok(out)
}

pub const EVAC_HEADER: [&str; 5] = ["user_id", "lgu_id", "evacuated", "distance_m", "first_night_away"];

pub fn write_evac_csv<W: Write>(writer: W, records: &BTreeMap<String, EvacRecord>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVAC_HEADER)?;
    for r in records.values() {
        w.write_record([
            r.user_id.as_str(),
            r.lgu_id.as_str(),
            if r.evacuated { "true" } else { "false" },
            &r.distance_m.to_string(),
            &r.first_night_away.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `evac.csv`. Nights-to-leave is recovered from the date of the first
/// post-event night.
pub fn read_evac_csv<R: Read>(reader: R, first_night: NaiveDate) -> Result<BTreeMap<String, EvacRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    check_header(&mut rdr, &EVAC_HEADER, "evac.csv")?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let evacuated: bool = parse_num(&row[2], "evac.csv")?;
        let first_night_away: Option<NaiveDate> = match row[4].trim() {
            "" => None,
            s => Some(parse_num(s, "evac.csv")?),
        };
        let rec = EvacRecord {
            user_id: row[0].to_string(),
            lgu_id: row[1].to_string(),
            evacuated,
            distance_m: parse_num(&row[3], "evac.csv")?,
            first_night_away,
            nights_to_leave: first_night_away.map(|d| ((d - first_night).num_days() + 1).max(1) as u32),
        };
        out.insert(rec.user_id.clone(), rec);
    }
    Ok(out)
}

pub const RATES_HEADER: [&str; 5] = ["lgu_id", "si", "M", "M_star", "rate"];

pub fn write_rates_csv<W: Write>(writer: W, obs: &[EvacObservation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RATES_HEADER)?;
    for o in obs {
        w.write_record([
            o.lgu_id.as_str(),
            &o.z.to_string(),
            &o.m.to_string(),
            &o.m_star.to_string(),
            &o.rate().map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rates_csv<R: Read>(reader: R) -> Result<Vec<EvacObservation>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    check_header(&mut rdr, &RATES_HEADER, "rates.csv")?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        out.push(EvacObservation::new(
            row[0].trim(),
            Intensity::from_value(parse_num(&row[1], "rates.csv")?)?,
            parse_num(&row[2], "rates.csv")?,
            parse_num(&row[3], "rates.csv")?,
        )?);
    }
    Ok(out)
}

/// Distinct intensities present in a set of observations.
pub fn intensities(obs: &[EvacObservation]) -> BTreeSet<Intensity> {
    obs.iter().map(|o| o.z).collect()
}
