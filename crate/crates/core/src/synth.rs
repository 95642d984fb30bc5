//! Deterministic synthetic scenarios: GPS logs with known homes, evacuation
//! labels and destinations.
//!
//! Every user draws from their own ChaCha stream selected by
//! `(lgu index, user index)`, so adding users or LGUs never changes the data
//! generated for existing ones.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evac::{write_intensity_csv, EvacObservation, Intensity};
use crate::fragility::{frag_eval, FragilityParams};
use crate::geo::{GeoPoint, LguRecord, LguRegistry, LocalPlane};
use crate::trajectory::{write_gps_csv, Fix, NightClock, Trajectory};

const DAY_S: i64 = 86_400;
const MORNING_S: i64 = 8 * 3600;
const EVENING_S: i64 = 18 * 3600;

/// 2016-04-14 21:26 JST.
pub const DEFAULT_EVENT_TIME: i64 = 1_460_636_760;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LguSpec {
    pub lgu_id: String,
    pub lat: f64,
    pub lon: f64,
    pub radius_m: f64,
    pub n_users: u32,
    pub z: f64,
}

/// Mean night of departure (1 = first post-event night) falls linearly from
/// `nights_at_4` at intensity 4 to `nights_at_7` at intensity 7; draws are
/// binomial on `1..=max_night`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayLaw {
    pub nights_at_4: f64,
    pub nights_at_7: f64,
    pub max_night: u32,
}

impl Default for DelayLaw {
    fn default() -> Self {
        DelayLaw {
            nights_at_4: 2.5,
            nights_at_7: 1.2,
            max_night: 3,
        }
    }
}

impl DelayLaw {
    pub fn mean_night(&self, z: f64) -> f64 {
        let t = ((z - 4.0) / 3.0).clamp(0.0, 1.0);
        let m = self.nights_at_4 + t * (self.nights_at_7 - self.nights_at_4);
        m.clamp(1.0, self.max_night as f64)
    }

    fn draw<R: Rng>(&self, z: f64, rng: &mut R) -> u32 {
        if self.max_night <= 1 {
            return 1;
        }
        let trials = (self.max_night - 1) as u64;
        let p = (self.mean_night(z) - 1.0) / trials as f64;
        1 + Binomial::new(trials, p.clamp(0.0, 1.0)).expect("valid p").sample(rng) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub event_time: i64,
    pub tz_offset_s: i64,
    pub days_before: u32,
    pub days_after: u32,
    pub fixes_per_day: f64,
    pub gps_noise_m: f64,
    pub frag_truth: FragilityParams,
    pub gamma_truth: f64,
    pub dest_min_m: f64,
    pub dest_max_m: f64,
    pub delay_law: DelayLaw,
    /// Share of users who spend weekday daytime at a work place 1–8 km away.
    pub work_share: f64,
    /// Per-night chance that a user sleeps at a secondary place before the event.
    pub secondary_night_prob: f64,
    pub lgus: Vec<LguSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 42,
            event_time: DEFAULT_EVENT_TIME,
            tz_offset_s: 9 * 3600,
            days_before: 14,
            days_after: 9,
            fixes_per_day: 40.0,
            gps_noise_m: 20.0,
            frag_truth: FragilityParams {
                mu: 1.73,
                sigma: 0.075,
                a: 0.63,
            },
            gamma_truth: 1.25,
            dest_min_m: 500.0,
            dest_max_m: 1e6,
            delay_law: DelayLaw::default(),
            work_share: 0.6,
            secondary_night_prob: 0.0,
            lgus: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// About 150 LGUs with 500–5,000 users each.
    Paper,
    /// 24 LGUs with 60–120 users each; quick to generate and analyse.
    Small,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "small" => Ok(Preset::Small),
            _ => Err(Error::config("preset", format!("unknown preset `{s}` (paper, small)"))),
        }
    }
}

impl ScenarioConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (n, users) = match preset {
            Preset::Paper => (150, (500, 5000)),
            Preset::Small => (24, (60, 120)),
        };
        ScenarioConfig {
            seed,
            lgus: lgu_layout(seed, n, users, (4.0, 6.7), 3000.0),
            ..ScenarioConfig::default()
        }
    }

    /// Reads a scenario from TOML. Missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("scenario", format!("{}: {e}", path.display())))?;
        let cfg: ScenarioConfig =
            toml::from_str(&text).map_err(|e| Error::config("scenario", e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lgus.is_empty() {
            return Err(Error::config("lgus", "at least one LGU is required"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for l in &self.lgus {
            if !ids.insert(l.lgu_id.as_str()) {
                return Err(Error::config("lgus", format!("duplicate lgu_id `{}`", l.lgu_id)));
            }
            if !(1.0..=7.0).contains(&l.z) {
                return Err(Error::config("lgus.z", format!("{}: {} outside [1, 7]", l.lgu_id, l.z)));
            }
            if !(l.radius_m > 0.0) {
                return Err(Error::config(
                    "lgus.radius_m",
                    format!("{}: must be positive", l.lgu_id),
                ));
            }
            GeoPoint::new(l.lat, l.lon).map_err(|e| Error::config("lgus.lat/lon", e.to_string()))?;
        }
        if self.days_before == 0 {
            return Err(Error::config("days_before", "must be at least 1"));
        }
        if self.days_after == 0 {
            return Err(Error::config("days_after", "must be at least 1"));
        }
        if !(self.fixes_per_day > 0.0) || !self.fixes_per_day.is_finite() {
            return Err(Error::config("fixes_per_day", "must be positive"));
        }
        if !(self.gps_noise_m >= 0.0) || !self.gps_noise_m.is_finite() {
            return Err(Error::config("gps_noise_m", "must be non-negative"));
        }
        self.frag_truth
            .validate()
            .map_err(|e| Error::config("frag_truth", e.to_string()))?;
        if !(self.gamma_truth > 0.0) || !self.gamma_truth.is_finite() {
            return Err(Error::config("gamma_truth", "must be positive"));
        }
        if !(self.dest_min_m > 0.0) || !(self.dest_max_m > self.dest_min_m) {
            return Err(Error::config("dest_min_m", "need 0 < dest_min_m < dest_max_m"));
        }
        if !(0.0..=1.0).contains(&self.work_share) {
            return Err(Error::config("work_share", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.secondary_night_prob) {
            return Err(Error::config("secondary_night_prob", "must lie in [0, 1]"));
        }
        if self.delay_law.max_night == 0 {
            return Err(Error::config("delay_law.max_night", "must be at least 1"));
        }
        Ok(())
    }

    pub fn clock(&self) -> NightClock {
        NightClock::new(self.tz_offset_s)
    }

    /// `[start, end)`: local midnight `days_before` days before the event
    /// date up to local midnight `days_after` days after the first
    /// post-event night.
    pub fn observation_window(&self) -> (i64, i64) {
        let clock = self.clock();
        let event_date = clock.local_date(self.event_time);
        let first = clock.first_night_after(self.event_time);
        let start = clock.local_midnight(event_date - chrono::TimeDelta::days(self.days_before as i64));
        let end = clock.local_midnight(first + chrono::TimeDelta::days(self.days_after as i64));
        (start, end)
    }

    pub fn total_users(&self) -> u64 {
        self.lgus.iter().map(|l| l.n_users as u64).sum()
    }
}

/// LGUs on a square lattice around Kumamoto, spaced so their discs never touch.
pub fn lgu_layout(seed: u64, n: usize, users: (u32, u32), z_range: (f64, f64), radius_m: f64) -> Vec<LguSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let plane = LocalPlane::new(GeoPoint { lat: 32.8, lon: 130.7 });
    let cols = (n as f64).sqrt().ceil() as usize;
    let spacing = 3.0 * radius_m;
    (0..n)
        .map(|i| {
            let (cx, cy) = ((i % cols) as f64 * spacing, (i / cols) as f64 * spacing);
            let c = plane.unproject(cx, cy);
            let z = (rng.random_range(z_range.0..=z_range.1) * 10.0).round() / 10.0;
            LguSpec {
                lgu_id: format!("L{:03}", i + 1),
                lat: c.lat,
                lon: c.lon,
                radius_m,
                n_users: rng.random_range(users.0..=users.1),
                z,
            }
        })
        .collect()
}

/// One sample of `p(d) ∝ d^(−γ)` on `[d_min, d_max]` by inverse transform.
pub fn sample_truncated_pareto<R: Rng + ?Sized>(rng: &mut R, gamma: f64, d_min: f64, d_max: f64) -> f64 {
    let u: f64 = rng.random();
    let beta = gamma - 1.0;
    if beta.abs() < 1e-12 {
        return d_min * (d_max / d_min).powf(u);
    }
    let (a, b) = (d_min.powf(-beta), d_max.powf(-beta));
    (a - u * (a - b)).powf(-1.0 / beta).clamp(d_min, d_max)
}

fn user_rng(seed: u64, lgu_idx: usize, user_idx: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((lgu_idx as u64) << 32) | user_idx as u64);
    rng
}

/// Point uniformly distributed in the disc of `radius_m` about `center`.
fn uniform_in_disc<R: Rng>(rng: &mut R, center: &GeoPoint, radius_m: f64) -> GeoPoint {
    let r = radius_m * rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    center.destination(theta, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user_id: String,
    pub lgu_id: String,
    pub home: GeoPoint,
    pub evacuated: bool,
    pub destination: Option<GeoPoint>,
    /// 1-based post-event night from which the user sleeps at the destination.
    pub evac_night: Option<u32>,
    /// Pre-event nights spent at a secondary place.
    pub secondary_nights: u32,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub trajectories: Vec<Trajectory>,
    pub truth: Vec<GroundTruth>,
    pub registry: LguRegistry,
    pub intensity: BTreeMap<String, Intensity>,
}

/// What a user does during the scenario, fixed before any fix is drawn.
struct UserPlan {
    home: GeoPoint,
    work: Option<GeoPoint>,
    secondary: GeoPoint,
    secondary_nights: Vec<bool>,
    destination: Option<(GeoPoint, u32)>,
}

impl UserPlan {
    /// Location for the night starting on local day `day` (days since epoch).
    fn night_loc(&self, day: i64, first_night_day: i64, window_start_day: i64) -> GeoPoint {
        if let Some((dest, k)) = self.destination {
            if day - first_night_day + 1 >= k as i64 {
                return dest;
            }
        }
        let idx = day - window_start_day;
        if day < first_night_day && idx >= 0 && self.secondary_nights.get(idx as usize) == Some(&true) {
            return self.secondary;
        }
        self.home
    }
}

fn plan_user<R: Rng>(rng: &mut R, cfg: &ScenarioConfig, home: GeoPoint, z: f64, n_pre_nights: usize) -> UserPlan {
    let work = (rng.random::<f64>() < cfg.work_share).then(|| {
        let d = rng.random_range(1000.0..8000.0);
        home.destination(rng.random::<f64>() * std::f64::consts::TAU, d)
    });
    let secondary = home.destination(
        rng.random::<f64>() * std::f64::consts::TAU,
        rng.random_range(1000.0..5000.0),
    );
    let secondary_nights = (0..n_pre_nights)
        .map(|_| rng.random::<f64>() < cfg.secondary_night_prob)
        .collect();
    let p = frag_eval(z, &cfg.frag_truth).expect("validated");
    let destination = (rng.random::<f64>() < p).then(|| {
        let d = sample_truncated_pareto(rng, cfg.gamma_truth, cfg.dest_min_m, cfg.dest_max_m);
        let dest = home.destination(rng.random::<f64>() * std::f64::consts::TAU, d);
        (dest, cfg.delay_law.draw(z, rng))
    });
    UserPlan {
        home,
        work,
        secondary,
        secondary_nights,
        destination,
    }
}

fn simulate_fixes<R: Rng>(rng: &mut R, cfg: &ScenarioConfig, plan: &UserPlan) -> Vec<Fix> {
    let clock = cfg.clock();
    let (start, end) = cfg.observation_window();
    let start_day = clock.local_day(start);
    let first_night_day = clock.local_day(clock.local_midnight(clock.first_night_after(cfg.event_time)));
    let poisson = Poisson::new(cfg.fixes_per_day).expect("validated");
    let noise = Normal::new(0.0, cfg.gps_noise_m.max(f64::MIN_POSITIVE)).expect("validated");

    let mut fixes = Vec::new();
    let mut day_start = start;
    while day_start < end {
        let day = clock.local_day(day_start);
        let n = poisson.sample(rng) as usize;
        let mut times: Vec<i64> = (0..n)
            .map(|_| rng.random_range(day_start.max(start + 1)..(day_start + DAY_S).min(end)))
            .collect();
        times.sort_unstable();
        for t in times {
            let s = clock.local_seconds(t);
            let loc = if s < MORNING_S {
                plan.night_loc(day - 1, first_night_day, start_day)
            } else if s < EVENING_S {
                let last = plan.night_loc(day - 1, first_night_day, start_day);
                if plan.destination.is_some_and(|(d, _)| d == last) {
                    last
                } else {
                    plan.work.unwrap_or(plan.home)
                }
            } else {
                plan.night_loc(day, first_night_day, start_day)
            };
            let pos = if cfg.gps_noise_m > 0.0 {
                let (dx, dy) = (noise.sample(rng), noise.sample(rng));
                let plane = LocalPlane::new(loc);
                plane.unproject(dx, dy)
            } else {
                loc
            };
            fixes.push(Fix { t, pos });
        }
        day_start += DAY_S;
    }
    fixes
}

fn simulate_user(
    cfg: &ScenarioConfig,
    lgu_idx: usize,
    user_idx: u32,
    home: Option<GeoPoint>,
) -> (Trajectory, GroundTruth) {
    let lgu = &cfg.lgus[lgu_idx];
    let mut rng = user_rng(cfg.seed, lgu_idx, user_idx);
    let center = GeoPoint {
        lat: lgu.lat,
        lon: lgu.lon,
    };
    let drawn = uniform_in_disc(&mut rng, &center, lgu.radius_m);
    let home = home.unwrap_or(drawn);
    let n_pre = cfg.days_before as usize + 1;
    let plan = plan_user(&mut rng, cfg, home, lgu.z, n_pre);
    let fixes = simulate_fixes(&mut rng, cfg, &plan);
    let user_id = format!("{}-u{:05}", lgu.lgu_id, user_idx);
    let truth = GroundTruth {
        user_id: user_id.clone(),
        lgu_id: lgu.lgu_id.clone(),
        home,
        evacuated: plan.destination.is_some(),
        destination: plan.destination.map(|d| d.0),
        evac_night: plan.destination.map(|d| d.1),
        secondary_nights: plan.secondary_nights.iter().filter(|b| **b).count() as u32,
    };
    (Trajectory { user_id, fixes }, truth)
}

fn registry_of(cfg: &ScenarioConfig) -> Result<(LguRegistry, BTreeMap<String, Intensity>)> {
    let records = cfg
        .lgus
        .iter()
        .map(|l| LguRecord {
            lgu_id: l.lgu_id.clone(),
            name: l.lgu_id.clone(),
            centroid: GeoPoint { lat: l.lat, lon: l.lon },
            boundary: None,
        })
        .collect();
    let registry = LguRegistry::new(records)?;
    let intensity = cfg
        .lgus
        .iter()
        .map(|l| Ok((l.lgu_id.clone(), Intensity::from_value(l.z)?)))
        .collect::<Result<_>>()?;
    Ok((registry, intensity))
}

/// Generates every user's trajectory and ground truth.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    generate_with_homes(cfg, &BTreeMap::new())
}

/// Like [`generate_scenario`] but with given homes for some `(lgu index, user
/// index)` pairs instead of drawing them uniformly in the LGU disc.
pub fn generate_with_homes(cfg: &ScenarioConfig, homes: &BTreeMap<(usize, u32), GeoPoint>) -> Result<Scenario> {
    use rayon::prelude::*;
    cfg.validate()?;
    let (registry, intensity) = registry_of(cfg)?;
    let jobs: Vec<(usize, u32)> = cfg
        .lgus
        .iter()
        .enumerate()
        .flat_map(|(i, l)| (0..l.n_users).map(move |k| (i, k)))
        .collect();
    let mut users: Vec<(Trajectory, GroundTruth)> = jobs
        .par_iter()
        .map(|&(i, k)| simulate_user(cfg, i, k, homes.get(&(i, k)).copied()))
        .collect();
    users.sort_by(|a, b| a.1.user_id.cmp(&b.1.user_id));
    let (trajectories, truth) = users.into_iter().unzip();
    Ok(Scenario {
        config: cfg.clone(),
        trajectories,
        truth,
        registry,
        intensity,
    })
}

/// Per-LGU counts `M* ~ Binomial(M, p(z))` without simulating trajectories.
pub fn generate_counts(cfg: &ScenarioConfig) -> Result<Vec<EvacObservation>> {
    cfg.validate()?;
    cfg.lgus
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((i as u64) << 32) | 0xFFFF_FFFF);
            let z = Intensity::from_value(l.z)?;
            let p = frag_eval(z.value(), &cfg.frag_truth)?;
            let m_star = Binomial::new(l.n_users as u64, p)
                .expect("p in [0, 1]")
                .sample(&mut rng);
            EvacObservation::new(l.lgu_id.clone(), z, l.n_users as u64, m_star)
        })
        .collect()
}

pub const GROUND_TRUTH_HEADER: [&str; 7] = [
    "user_id",
    "home_lat",
    "home_lon",
    "evacuated",
    "dest_lat",
    "dest_lon",
    "evac_night",
];

pub fn write_ground_truth_csv<W: Write>(writer: W, truth: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(GROUND_TRUTH_HEADER)?;
    for g in truth {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            g.user_id.clone(),
            g.home.lat.to_string(),
            g.home.lon.to_string(),
            g.evacuated.to_string(),
            opt(g.destination.map(|d| d.lat)),
            opt(g.destination.map(|d| d.lon)),
            g.evac_night.map(|n| n.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl Scenario {
    /// Writes `gps.csv`, `lgu.csv`, `intensity.csv`, `ground_truth.csv` and
    /// `scenario.toml` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        write_gps_csv(open("gps.csv")?, &self.trajectories)?;
        self.registry.write_csv(open("lgu.csv")?)?;
        write_intensity_csv(open("intensity.csv")?, &self.intensity)?;
        write_ground_truth_csv(open("ground_truth.csv")?, &self.truth)?;
        let toml = toml::to_string(&self.config).map_err(|e| Error::InvalidInput(e.to_string()))?;
        open("scenario.toml")?.write_all(toml.as_bytes())?;
        Ok(())
    }

    pub fn truth_by_user(&self) -> BTreeMap<&str, &GroundTruth> {
        self.truth.iter().map(|g| (g.user_id.as_str(), g)).collect()
    }
}

/// A residential population built from Gaussian blobs over a uniform
/// background, with a random panel of tracked residents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CityConfig {
    pub seed: u64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub n_residents: u32,
    pub n_blobs: u32,
    /// Blob centres fall within this distance of the city centre.
    pub extent_m: f64,
    pub blob_sigma_m: (f64, f64),
    pub background_share: f64,
    pub sample_rate: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        CityConfig {
            seed: 42,
            center_lat: 32.8,
            center_lon: 130.7,
            n_residents: 300_000,
            n_blobs: 6,
            extent_m: 12_000.0,
            blob_sigma_m: (1000.0, 3500.0),
            background_share: 0.1,
            sample_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct City {
    pub residents: Vec<GeoPoint>,
    /// Indices into `residents` of the tracked panel, ascending.
    pub panel: Vec<usize>,
}

pub fn generate_city(cfg: &CityConfig) -> Result<City> {
    if !(cfg.sample_rate > 0.0 && cfg.sample_rate <= 1.0) {
        return Err(Error::config("sample_rate", "must lie in (0, 1]"));
    }
    if cfg.n_blobs == 0 || !(cfg.extent_m > 0.0) || !(cfg.blob_sigma_m.0 > 0.0) {
        return Err(Error::config("n_blobs", "need at least one blob with positive size"));
    }
    let center = GeoPoint::new(cfg.center_lat, cfg.center_lon)?;
    let plane = LocalPlane::new(center);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..cfg.n_blobs)
        .map(|_| {
            let r = cfg.extent_m * rng.random::<f64>().sqrt();
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            let sigma = rng.random_range(cfg.blob_sigma_m.0..=cfg.blob_sigma_m.1.max(cfg.blob_sigma_m.0));
            let weight = rng.random_range(0.3..1.0);
            (r * th.cos(), r * th.sin(), sigma, weight)
        })
        .collect();
    let total_w: f64 = blobs.iter().map(|b| b.3).sum();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut residents = Vec::with_capacity(cfg.n_residents as usize);
    let mut panel = Vec::new();
    for i in 0..cfg.n_residents as usize {
        let (x, y) = if rng.random::<f64>() < cfg.background_share {
            let r = 1.5 * cfg.extent_m * rng.random::<f64>().sqrt();
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            (r * th.cos(), r * th.sin())
        } else {
            let mut pick = rng.random::<f64>() * total_w;
            let b = blobs
                .iter()
                .find(|b| {
                    pick -= b.3;
                    pick < 0.0
                })
                .unwrap_or(&blobs[blobs.len() - 1]);
            (b.0 + b.2 * std.sample(&mut rng), b.1 + b.2 * std.sample(&mut rng))
        };
        residents.push(plane.unproject(x, y));
        if rng.random::<f64>() < cfg.sample_rate {
            panel.push(i);
        }
    }
    Ok(City { residents, panel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_unchecked;

    fn tiny() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::preset(Preset::Small, 7);
        cfg.lgus.truncate(3);
        for l in &mut cfg.lgus {
            l.n_users = 20;
        }
        cfg.days_before = 6;
        cfg
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = tiny();
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        let (mut ga, mut gb) = (Vec::new(), Vec::new());
        write_gps_csv(&mut ga, &a.trajectories).unwrap();
        write_gps_csv(&mut gb, &b.trajectories).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn adding_users_keeps_existing_users() {
        let cfg = tiny();
        let mut more = cfg.clone();
        more.lgus[0].n_users += 5;
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&more).unwrap();
        let tb: BTreeMap<_, _> = b.trajectories.iter().map(|t| (t.user_id.clone(), t)).collect();
        for t in &a.trajectories {
            assert_eq!(tb[&t.user_id], t);
        }
    }

    #[test]
    fn counts_and_window() {
        let cfg = tiny();
        let s = generate_scenario(&cfg).unwrap();
        assert_eq!(s.truth.len() as u64, cfg.total_users());
        let (start, end) = cfg.observation_window();
        for t in &s.trajectories {
            assert!(t.fixes.windows(2).all(|w| w[0].t <= w[1].t));
            assert!(t.fixes.iter().all(|f| f.t > start && f.t < end));
        }
    }

    #[test]
    fn evacuees_are_far_and_others_have_no_destination() {
        let s = generate_scenario(&tiny()).unwrap();
        for g in &s.truth {
            match (g.evacuated, g.destination, g.evac_night) {
                (true, Some(d), Some(n)) => {
                    assert!(haversine_unchecked(&g.home, &d) > 200.0);
                    assert!((1..=3).contains(&n));
                }
                (false, None, None) => {}
                other => panic!("inconsistent truth {other:?}"),
            }
        }
    }

    #[test]
    fn pareto_samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = sample_truncated_pareto(&mut rng, 1.25, 200.0, 1e6);
            assert!((200.0..=1e6).contains(&d));
        }
    }

    #[test]
    fn delay_law_decreases_with_intensity() {
        let law = DelayLaw::default();
        assert!(law.mean_night(4.0) > law.mean_night(5.5));
        assert!(law.mean_night(5.5) > law.mean_night(7.0));
    }

    #[test]
    fn binomial_counts_match_law() {
        // Each LGU's fraction should sit within 3 binomial standard errors.
        let mut cfg = ScenarioConfig::preset(Preset::Small, 3);
        for l in &mut cfg.lgus {
            l.n_users = 2000;
        }
        let obs = generate_counts(&cfg).unwrap();
        for o in &obs {
            let p = frag_eval(o.z.value(), &cfg.frag_truth).unwrap();
            let se = (p * (1.0 - p) / o.m as f64).sqrt().max(1e-12);
            assert!(
                (o.rate().unwrap() - p).abs() <= 3.0 * se + 1.0 / o.m as f64,
                "{o:?} vs {p}"
            );
        }
    }

    #[test]
    fn config_validation_names_field() {
        let mut cfg = tiny();
        cfg.lgus[0].z = 8.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "lgus.z"));
        let mut cfg = tiny();
        cfg.fixes_per_day = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "fixes_per_day"));
    }
}
