//! Pipeline configuration read from TOML. Missing keys take their defaults;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::distdist::CollapseParams;
use crate::error::{Error, Result};
use crate::evac::EvacParams;
use crate::fragility::FitOptions;
use crate::geo::GeoPoint;
use crate::homeloc::{HomeParams, MeanShiftParams};
use crate::trajectory::{NightClock, StaypointParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PopSource {
    /// One count per user at their estimated home.
    #[default]
    Homes,
    /// One count per user in the cell holding most of their night fixes.
    NightFixes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub gps: PathBuf,
    pub lgu: PathBuf,
    pub intensity: PathBuf,
    pub census: Option<PathBuf>,
    pub output_dir: PathBuf,

    /// Epoch seconds; an RFC 3339 string is also accepted.
    #[serde(deserialize_with = "de_event_time")]
    pub event_time: Option<i64>,
    pub tz_offset_s: i64,

    pub staypoint_dist_m: f64,
    pub staypoint_min_duration_s: i64,
    pub bandwidth_m: f64,
    pub min_nights: usize,
    pub r_m: f64,
    pub window_days: u32,

    /// LGUs below this intensity are left out of the fit.
    pub min_si: f64,
    pub fit_binned: bool,
    pub curve_min_si: f64,
    pub curve_max_si: f64,

    pub dist_min_m: f64,
    pub dist_max_m: f64,
    pub bins_per_decade: u32,
    pub r_sweep_m: Vec<f64>,

    pub sample_rate: f64,
    pub cell_size_m: f64,
    /// Grid origin; the first LGU centroid when unset.
    pub grid_origin: Option<GeoPoint>,
    pub pop_source: PopSource,

    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gps: "gps.csv".into(),
            lgu: "lgu.csv".into(),
            intensity: "intensity.csv".into(),
            census: None,
            output_dir: "out".into(),
            event_time: None,
            tz_offset_s: 9 * 3600,
            staypoint_dist_m: 200.0,
            staypoint_min_duration_s: 900,
            bandwidth_m: 100.0,
            min_nights: 5,
            r_m: 200.0,
            window_days: 7,
            min_si: 4.0,
            fit_binned: false,
            curve_min_si: 4.0,
            curve_max_si: 7.0,
            dist_min_m: 200.0,
            dist_max_m: 1e6,
            bins_per_decade: 5,
            r_sweep_m: vec![100.0, 200.0, 300.0],
            sample_rate: 0.01,
            cell_size_m: 1000.0,
            grid_origin: None,
            pop_source: PopSource::Homes,
            seed: 42,
        }
    }
}

fn de_event_time<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<i64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Epoch(i64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Epoch(t)) => Ok(Some(t)),
        Some(Raw::Text(s)) => parse_event_time(&s).map(Some).map_err(serde::de::Error::custom),
    }
}

/// Epoch seconds or an RFC 3339 timestamp.
pub fn parse_event_time(s: &str) -> Result<i64> {
    if let Ok(t) = s.trim().parse::<i64>() {
        return Ok(t);
    }
    chrono::DateTime::parse_from_rfc3339(s.trim())
        .map(|dt| dt.timestamp())
        .map_err(|e| Error::config("event_time", format!("`{s}`: {e}")))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::config(field, format!("must be positive, got {v}")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        positive("staypoint_dist_m", self.staypoint_dist_m)?;
        if self.staypoint_min_duration_s <= 0 {
            return Err(Error::config("staypoint_min_duration_s", "must be positive"));
        }
        positive("bandwidth_m", self.bandwidth_m)?;
        if self.min_nights == 0 {
            return Err(Error::config("min_nights", "must be at least 1"));
        }
        positive("r_m", self.r_m)?;
        if self.window_days == 0 {
            return Err(Error::config("window_days", "must be at least 1"));
        }
        if self.tz_offset_s.abs() > 14 * 3600 {
            return Err(Error::config("tz_offset_s", "must lie within ±14 h"));
        }
        positive("min_si", self.min_si)?;
        positive("curve_min_si", self.curve_min_si)?;
        if !(self.curve_max_si > self.curve_min_si) {
            return Err(Error::config("curve_max_si", "must exceed curve_min_si"));
        }
        positive("dist_min_m", self.dist_min_m)?;
        if !(self.dist_max_m > self.dist_min_m) || !self.dist_max_m.is_finite() {
            return Err(Error::config("dist_max_m", "must exceed dist_min_m"));
        }
        if self.bins_per_decade == 0 {
            return Err(Error::config("bins_per_decade", "must be at least 1"));
        }
        if self.r_sweep_m.is_empty()
            || self.r_sweep_m.iter().any(|r| !(*r > 0.0))
            || self.r_sweep_m.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::config(
                "r_sweep_m",
                "must be non-empty, positive and strictly ascending",
            ));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::config(
                "sample_rate",
                format!("must lie in (0, 1], got {}", self.sample_rate),
            ));
        }
        positive("cell_size_m", self.cell_size_m)?;
        if let Some(o) = self.grid_origin {
            GeoPoint::new(o.lat, o.lon).map_err(|e| Error::config("grid_origin", e.to_string()))?;
        }
        Ok(())
    }

    pub fn event_time(&self) -> Result<i64> {
        self.event_time
            .ok_or_else(|| Error::config("event_time", "required for evacuation analysis"))
    }

    pub fn clock(&self) -> NightClock {
        NightClock::new(self.tz_offset_s)
    }

    pub fn staypoint_params(&self) -> StaypointParams {
        StaypointParams {
            dist_threshold_m: self.staypoint_dist_m,
            min_duration_s: self.staypoint_min_duration_s,
        }
    }

    pub fn mean_shift(&self) -> MeanShiftParams {
        MeanShiftParams {
            bandwidth_m: self.bandwidth_m,
            ..MeanShiftParams::default()
        }
    }

    pub fn home_params(&self) -> HomeParams {
        HomeParams {
            mean_shift: self.mean_shift(),
            min_nights: self.min_nights,
        }
    }

    pub fn evac_params(&self) -> EvacParams {
        self.evac_params_at(self.r_m)
    }

    pub fn evac_params_at(&self, r_m: f64) -> EvacParams {
        EvacParams {
            r_m,
            window_days: self.window_days,
            mean_shift: self.mean_shift(),
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            binned: self.fit_binned,
            ..FitOptions::default()
        }
    }

    pub fn collapse_params(&self) -> CollapseParams {
        CollapseParams {
            bins_per_decade: self.bins_per_decade,
            d_min: self.dist_min_m,
            d_max: self.dist_max_m,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.r_m, 200.0);
        assert_eq!(cfg.window_days, 7);
        assert_eq!(cfg.bandwidth_m, 100.0);
        assert_eq!(cfg.tz_offset_s, 32_400);
    }

    #[test]
    fn negative_r_names_field() {
        let err = PipelineConfig::from_toml("r_m = -5.0").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "r_m"), "{err}");
    }

    #[test]
    fn unknown_key_names_field() {
        let err = PipelineConfig::from_toml("radius = 3.0").unwrap_err();
        assert!(
            matches!(&err, Error::Config { field, .. } if field == "radius"),
            "{err}"
        );
    }

    #[test]
    fn roundtrip() {
        let cfg = PipelineConfig {
            event_time: Some(1_460_636_760),
            census: Some("census.csv".into()),
            grid_origin: Some(GeoPoint { lat: 32.8, lon: 130.7 }),
            pop_source: PopSource::NightFixes,
            r_sweep_m: vec![150.0, 250.0],
            ..PipelineConfig::default()
        };
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn event_time_forms() {
        let a = PipelineConfig::from_toml("event_time = 1460636760").unwrap();
        let b = PipelineConfig::from_toml("event_time = \"2016-04-14T21:26:00+09:00\"").unwrap();
        assert_eq!(a.event_time, Some(1_460_636_760));
        assert_eq!(a.event_time, b.event_time);
        assert!(PipelineConfig::from_toml("event_time = \"yesterday\"").is_err());
    }
}
