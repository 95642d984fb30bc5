//! End-to-end run: ingest → staypoints → homes → evacuation → rates →
//! fragility fit → distance fit → reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, PopSource};
use crate::distdist::{collapse_check, distance_pdf, fit_power_law, write_distpdf_csv, PowerLawRecord};
use crate::error::{Error, Result};
use crate::evac::{
    aggregate_observations, detect_all, evacuation_timing_hist, pool_by_intensity, read_intensity_csv, write_evac_csv,
    write_rates_csv, EvacObservation, EvacRecord, Intensity, IntensityBin,
};
use crate::fragility::{curve_points, fit_mle, r_sensitivity_sweep, FitReport, SweepRow};
use crate::geo::{GridSpec, LguRegistry};
use crate::homeloc::{estimate_home, write_homes_csv, HomeEstimate, HomeParams};
use crate::popest::{
    census_correlation, estimate_from_homes, estimate_from_night_fixes, read_census_csv, write_popgrid_csv,
    PopulationGrid,
};
use crate::trajectory::{extract_all, nighttime_filter, parse_gps_csv, GpsLog, NightClock, Staypoint};

pub const GENERATOR: &str = concat!("shindo ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Staypoints,
    Homes,
    Evacuation,
    Rates,
    Fit,
    DistFit,
    Population,
    Reports,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.source.class().exit_code()
    }

    /// Machine-readable form written to `error.json`.
    pub fn report(&self) -> serde_json::Value {
        serde_json::json!({
            "stage": self.stage,
            "class": format!("{:?}", self.source.class()).to_lowercase(),
            "exit_code": self.exit_code(),
            "message": self.source.to_string(),
        })
    }
}

pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    std::io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Digest of the analysis parameters; the output directory is left out so
/// that identical analyses written to different places carry the same digest.
pub fn config_digest(cfg: &PipelineConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    sha256_hex(c.to_toml().as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub generator: String,
    pub config_sha256: String,
    #[serde(flatten)]
    pub data: T,
}

pub fn read_json_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let env: Envelope<T> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok(env.data)
}

/// Output directory whose files carry a provenance header and are recorded
/// with their digests.
pub struct Artifacts {
    dir: PathBuf,
    config_sha256: String,
    written: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn new(dir: &Path, config_sha256: String) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            config_sha256,
            written: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &BTreeMap<String, String> {
        &self.written
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        write_atomic(&self.dir.join(name), &bytes)?;
        self.written.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// A `#`-comment header line followed by whatever `body` writes.
    pub fn csv<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = format!("# {GENERATOR} config_sha256={}\n", self.config_sha256).into_bytes();
        body(&mut buf)?;
        self.put(name, buf)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<()> {
        let env = Envelope {
            generator: GENERATOR.to_string(),
            config_sha256: self.config_sha256.clone(),
            data,
        };
        let mut buf = serde_json::to_vec_pretty(&env)?;
        buf.push(b'\n');
        self.put(name, buf)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let mut buf = format!("# {GENERATOR} config_sha256={}\n", self.config_sha256).into_bytes();
        buf.extend_from_slice(text.as_bytes());
        self.put(name, buf)
    }
}

pub struct Inputs {
    pub log: GpsLog,
    pub registry: LguRegistry,
    pub intensity: BTreeMap<String, Intensity>,
    /// Input name → (path, sha256).
    pub digests: BTreeMap<String, (PathBuf, String)>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))
}

pub fn load_inputs(cfg: &PipelineConfig) -> std::result::Result<Inputs, StageError> {
    let log = open(&cfg.gps).and_then(parse_gps_csv).stage(Stage::Ingest)?;
    if log.skipped > 0 {
        log::warn!("skipped {} malformed GPS rows of {}", log.skipped, log.rows);
    }
    let registry = open(&cfg.lgu).and_then(LguRegistry::read_csv).stage(Stage::Ingest)?;
    let intensity = open(&cfg.intensity).and_then(read_intensity_csv).stage(Stage::Ingest)?;
    let mut digests = BTreeMap::new();
    for (name, path) in [("gps", &cfg.gps), ("lgu", &cfg.lgu), ("intensity", &cfg.intensity)] {
        digests.insert(
            name.to_string(),
            (path.clone(), sha256_file(path).stage(Stage::Ingest)?),
        );
    }
    if let Some(c) = &cfg.census {
        digests.insert("census".to_string(), (c.clone(), sha256_file(c).stage(Stage::Ingest)?));
    }
    Ok(Inputs {
        log,
        registry,
        intensity,
        digests,
    })
}

/// Homes from each user's nighttime staypoints before `event_time`. Users
/// without a home are returned with the reason.
pub fn estimate_homes(
    staypoints: &BTreeMap<String, Vec<Staypoint>>,
    event_time: i64,
    clock: NightClock,
    params: HomeParams,
    registry: &LguRegistry,
) -> (BTreeMap<String, HomeEstimate>, BTreeMap<String, String>) {
    let users: Vec<(&String, &Vec<Staypoint>)> = staypoints.iter().collect();
    let results: Vec<(String, Result<HomeEstimate>)> = users
        .par_iter()
        .map(|(u, sps)| {
            let pre: Vec<Staypoint> = sps.iter().filter_map(|s| s.clipped(i64::MIN, event_time)).collect();
            let night = nighttime_filter(&pre, clock);
            ((*u).clone(), estimate_home(u, &night, params, registry))
        })
        .collect();
    let mut homes = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for (u, r) in results {
        match r {
            Ok(h) => {
                homes.insert(u, h);
            }
            Err(e) => {
                excluded.insert(u, e.to_string());
            }
        }
    }
    (homes, excluded)
}

/// Inputs plus everything that does not depend on the evacuation threshold.
pub struct Prepared {
    pub inputs: Inputs,
    pub event_time: i64,
    pub staypoints: BTreeMap<String, Vec<Staypoint>>,
    pub homes: BTreeMap<String, HomeEstimate>,
    pub home_excluded: BTreeMap<String, String>,
}

pub fn prepare(cfg: &PipelineConfig, inputs: Inputs) -> std::result::Result<Prepared, StageError> {
    let event_time = cfg.event_time().stage(Stage::Config)?;
    let (lo, hi) = inputs
        .log
        .span()
        .ok_or_else(|| Error::InvalidInput("no GPS fixes".into()))
        .stage(Stage::Ingest)?;
    if event_time < lo || event_time > hi {
        return Err(Error::config(
            "event_time",
            format!("{event_time} lies outside the GPS observation span [{lo}, {hi}]"),
        ))
        .stage(Stage::Config);
    }
    let staypoints = extract_all(&inputs.log.trajectories, cfg.staypoint_params()).stage(Stage::Staypoints)?;
    let (homes, home_excluded) = estimate_homes(
        &staypoints,
        event_time,
        cfg.clock(),
        cfg.home_params(),
        &inputs.registry,
    );
    if homes.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no user has a home estimate ({} excluded)",
            home_excluded.len()
        )))
        .stage(Stage::Homes);
    }
    log::info!("{} homes, {} users excluded", homes.len(), home_excluded.len());
    Ok(Prepared {
        inputs,
        event_time,
        staypoints,
        homes,
        home_excluded,
    })
}

pub struct Detection {
    pub records: BTreeMap<String, EvacRecord>,
    pub excluded: BTreeMap<String, String>,
    /// Every LGU with users and an intensity.
    pub observations: Vec<EvacObservation>,
    pub missing_intensity: Vec<String>,
}

impl Detection {
    /// Observations at or above `min_si`, the ones that enter the fit.
    pub fn fit_observations(&self, min_si: f64) -> Vec<EvacObservation> {
        let min = Intensity::from_value(min_si).map(|i| i.tenths()).unwrap_or(0);
        self.observations
            .iter()
            .filter(|o| o.z.tenths() >= min)
            .cloned()
            .collect()
    }
}

pub fn detect(prepared: &Prepared, cfg: &PipelineConfig, r_m: f64) -> std::result::Result<Detection, StageError> {
    let (records, excluded) = detect_all(
        &prepared.homes,
        &prepared.staypoints,
        prepared.event_time,
        cfg.clock(),
        cfg.evac_params_at(r_m),
    )
    .stage(Stage::Evacuation)?;
    let (observations, missing_intensity) = aggregate_observations(&records, &prepared.inputs.intensity);
    if !missing_intensity.is_empty() {
        log::warn!("{} LGUs have users but no intensity", missing_intensity.len());
    }
    Ok(Detection {
        records,
        excluded,
        observations,
        missing_intensity,
    })
}

pub fn r_sweep(prepared: &Prepared, cfg: &PipelineConfig) -> std::result::Result<Vec<SweepRow>, StageError> {
    r_sensitivity_sweep(
        &cfg.r_sweep_m,
        |r| {
            detect(prepared, cfg, r)
                .map(|d| d.fit_observations(cfg.min_si))
                .map_err(|e| e.source)
        },
        &cfg.fit_options(),
    )
    .stage(Stage::Fit)
}

pub const RSWEEP_HEADER: [&str; 8] = ["r_m", "M", "M_star", "mu", "sigma", "a", "log_likelihood", "status"];

pub fn write_rsweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RSWEEP_HEADER)?;
    for row in rows {
        let m: u64 = row.observations.iter().map(|o| o.m).sum();
        let ms: u64 = row.observations.iter().map(|o| o.m_star).sum();
        let mut rec = vec![row.r_m.to_string(), m.to_string(), ms.to_string()];
        match &row.fit {
            Ok(f) => rec.extend([
                f.params.mu.to_string(),
                f.params.sigma.to_string(),
                f.params.a.to_string(),
                f.log_likelihood.to_string(),
                "ok".to_string(),
            ]),
            Err(e) => rec.extend(["", "", "", "", e.as_str()].map(String::from)),
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Evacuee distances grouped by the 0.5-wide intensity bin of their LGU.
pub fn distances_by_bin(
    records: &BTreeMap<String, EvacRecord>,
    intensity: &BTreeMap<String, Intensity>,
) -> BTreeMap<IntensityBin, Vec<f64>> {
    let mut out: BTreeMap<IntensityBin, Vec<f64>> = BTreeMap::new();
    for r in records.values().filter(|r| r.evacuated) {
        if let Some(z) = intensity.get(&r.lgu_id) {
            out.entry(z.half_bin()).or_default().push(r.distance_m);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct DistSummary {
    pub fits: Vec<PowerLawRecord>,
    pub max_l1: Option<f64>,
    pub gamma_spread: Option<f64>,
    pub notes: Vec<String>,
}

/// Power-law fits (pooled and per bin) and the binned PDFs. Too few samples
/// is not fatal: the affected fit is skipped with a note.
pub fn distance_analysis(
    records: &BTreeMap<String, EvacRecord>,
    intensity: &BTreeMap<String, Intensity>,
    cfg: &PipelineConfig,
) -> Result<(DistSummary, BTreeMap<String, crate::distdist::LogBinnedPdf>)> {
    let groups = distances_by_bin(records, intensity);
    let all: Vec<f64> = groups.values().flatten().copied().collect();
    let mut notes = Vec::new();
    let mut fits = Vec::new();
    let mut pdfs = BTreeMap::new();
    match fit_power_law(&all, cfg.dist_min_m, cfg.dist_max_m) {
        Ok(f) => fits.push(PowerLawRecord::new("all", &f)),
        Err(e @ (Error::InsufficientSamples { .. } | Error::DegenerateData(_))) => notes.push(format!("all: {e}")),
        Err(e) => return Err(e),
    }
    match distance_pdf(&all, cfg.bins_per_decade, (cfg.dist_min_m, cfg.dist_max_m)) {
        Ok(p) => {
            pdfs.insert("all".to_string(), p);
        }
        Err(Error::EmptyDistribution) => notes.push("all: no distances in range".into()),
        Err(e) => return Err(e),
    }
    let (mut max_l1, mut gamma_spread) = (None, None);
    match collapse_check(&groups, cfg.collapse_params()) {
        Ok(rep) => {
            max_l1 = Some(rep.max_l1);
            gamma_spread = rep.gamma_spread;
            fits.extend(rep.fits.iter().map(|(b, f)| PowerLawRecord::new(b.clone(), f)));
            pdfs.extend(rep.pdfs);
        }
        Err(e @ Error::NothingToCompare(_)) => notes.push(format!("per-bin: {e}")),
        Err(e) => return Err(e),
    }
    Ok((
        DistSummary {
            fits,
            max_l1,
            gamma_spread,
            notes,
        },
        pdfs,
    ))
}

pub fn population_grid(
    prepared: &Prepared,
    cfg: &PipelineConfig,
) -> Result<(PopulationGrid, Option<PopulationGrid>, Option<f64>)> {
    let origin = match cfg.grid_origin {
        Some(o) => o,
        None => prepared
            .inputs
            .registry
            .records()
            .first()
            .map(|r| r.centroid)
            .ok_or_else(|| Error::config("grid_origin", "unset and no LGU to default to"))?,
    };
    let spec = GridSpec::new(cfg.cell_size_m, origin)?;
    let est = match cfg.pop_source {
        PopSource::Homes => estimate_from_homes(&prepared.homes, cfg.sample_rate, spec)?,
        PopSource::NightFixes => {
            estimate_from_night_fixes(&prepared.inputs.log.trajectories, cfg.clock(), cfg.sample_rate, spec)?
        }
    };
    let census = match &cfg.census {
        Some(p) => Some(read_census_csv(open(p)?, spec)?),
        None => None,
    };
    let r = census.as_ref().map(|c| census_correlation(&est, c)).transpose()?;
    Ok((est, census, r))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub users: usize,
    pub homes: usize,
    pub home_excluded: usize,
    pub detected: usize,
    pub undetermined: usize,
    pub evacuated: usize,
    pub fit_observations: usize,
    pub fit: FitReport,
    pub gamma: Option<f64>,
    pub gamma_spread: Option<f64>,
    pub population_total: f64,
    pub census_r: Option<f64>,
}

pub const CURVE_HEADER: [&str; 2] = ["z", "p"];
pub const CURVE_STEP: f64 = 0.05;

/// Contents of `fragility.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragilityRecord {
    pub mu: f64,
    pub sigma: f64,
    pub a: f64,
    pub log_likelihood: f64,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    #[serde(rename = "MAPE")]
    pub mape: Option<f64>,
    #[serde(rename = "MAPE_pp")]
    pub mape_pp: f64,
    pub n_obs: usize,
    pub r_m: f64,
    pub window_days: u32,
}

impl FragilityRecord {
    pub fn new(fit: &FitReport, r_m: f64, window_days: u32) -> Self {
        FragilityRecord {
            mu: fit.params.mu,
            sigma: fit.params.sigma,
            a: fit.params.a,
            log_likelihood: fit.log_likelihood,
            r: fit.r,
            mape: fit.mape,
            mape_pp: fit.mape_pp,
            n_obs: fit.n_obs,
            r_m,
            window_days,
        }
    }

    pub fn params(&self) -> Result<crate::fragility::FragilityParams> {
        crate::fragility::FragilityParams::new(self.mu, self.sigma, self.a)
    }
}
pub const POOLED_HEADER: [&str; 4] = ["si", "M", "M_star", "rate"];
pub const TIMING_HEADER: [&str; 5] = ["si_bin", "night_lo", "night_hi", "mass", "n"];
pub const EXCLUDED_HEADER: [&str; 3] = ["user_id", "stage", "reason"];

pub fn write_curve_csv<W: Write>(
    writer: W,
    params: &crate::fragility::FragilityParams,
    lo: f64,
    hi: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CURVE_HEADER)?;
    for (z, p) in curve_points(params, lo, hi, CURVE_STEP) {
        w.write_record([z.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pooled_csv<W: Write>(writer: W, obs: &[EvacObservation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POOLED_HEADER)?;
    for o in pool_by_intensity(obs) {
        w.write_record([
            o.z.to_string(),
            o.m.to_string(),
            o.m_star.to_string(),
            o.rate().map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<W: Write>(
    writer: W,
    records: &BTreeMap<String, EvacRecord>,
    intensity: &BTreeMap<String, Intensity>,
) -> Result<()> {
    let recs: Vec<EvacRecord> = records.values().cloned().collect();
    let hist = evacuation_timing_hist(&recs, intensity, 1)?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TIMING_HEADER)?;
    for (bin, h) in hist {
        for (i, m) in h.masses.iter().enumerate() {
            let lo = i as u32 * h.bin_width_days + 1;
            w.write_record([
                bin.to_string(),
                lo.to_string(),
                (lo + h.bin_width_days - 1).to_string(),
                m.to_string(),
                h.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_excluded_csv<W: Write>(writer: W, groups: &[(&str, &BTreeMap<String, String>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EXCLUDED_HEADER)?;
    for (stage, users) in groups {
        for (u, reason) in *users {
            w.write_record([u.as_str(), stage, reason.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    inputs: BTreeMap<&'a str, serde_json::Value>,
    parameters: &'a PipelineConfig,
    outputs: &'a BTreeMap<String, String>,
}

fn run_stages(cfg: &PipelineConfig) -> std::result::Result<RunSummary, StageError> {
    cfg.validate().stage(Stage::Config)?;
    let mut out = Artifacts::new(&cfg.output_dir, config_digest(cfg)).stage(Stage::Reports)?;
    let reports = |r: Result<()>| r.stage(Stage::Reports);

    let inputs = load_inputs(cfg)?;
    let prepared = prepare(cfg, inputs)?;
    reports(out.csv("homes.csv", |w| write_homes_csv(w, &prepared.homes)))?;

    let det = detect(&prepared, cfg, cfg.r_m)?;
    reports(out.csv("evac.csv", |w| write_evac_csv(w, &det.records)))?;
    reports(out.csv("excluded.csv", |w| {
        write_excluded_csv(w, &[("homes", &prepared.home_excluded), ("evacuation", &det.excluded)])
    }))?;
    reports(out.csv("rates.csv", |w| write_rates_csv(w, &det.observations)))?;

    let fit_obs = det.fit_observations(cfg.min_si);
    let fit = fit_mle(&fit_obs, &cfg.fit_options()).stage(Stage::Fit)?;
    reports(out.json("fragility.json", &FragilityRecord::new(&fit, cfg.r_m, cfg.window_days)))?;
    reports(out.csv("curve.csv", |w| {
        write_curve_csv(w, &fit.params, cfg.curve_min_si, cfg.curve_max_si)
    }))?;
    reports(out.csv("pooled.csv", |w| write_pooled_csv(w, &fit_obs)))?;
    reports(out.csv("timing.csv", |w| {
        write_timing_csv(w, &det.records, &prepared.inputs.intensity)
    }))?;

    let (dist, pdfs) = distance_analysis(&det.records, &prepared.inputs.intensity, cfg).stage(Stage::DistFit)?;
    for n in &dist.notes {
        log::warn!("distance fit: {n}");
    }
    reports(out.json("powerlaw.json", &dist))?;
    reports(out.csv("distpdf.csv", |w| write_distpdf_csv(w, &pdfs)))?;

    let (est, census, census_r) = population_grid(&prepared, cfg).stage(Stage::Population)?;
    reports(out.csv("popgrid.csv", |w| write_popgrid_csv(w, &est, census.as_ref())))?;

    let summary = RunSummary {
        users: prepared.inputs.log.trajectories.len(),
        homes: prepared.homes.len(),
        home_excluded: prepared.home_excluded.len(),
        detected: det.records.len(),
        undetermined: det.excluded.len(),
        evacuated: det.records.values().filter(|r| r.evacuated).count(),
        fit_observations: fit_obs.len(),
        fit,
        gamma: dist.fits.iter().find(|f| f.si_bin == "all").map(|f| f.gamma),
        gamma_spread: dist.gamma_spread,
        population_total: est.total(),
        census_r,
    };
    reports(out.json("summary.json", &summary))?;
    reports(out.text("config.toml", &cfg.to_toml()))?;

    let inputs: BTreeMap<&str, serde_json::Value> = prepared
        .inputs
        .digests
        .iter()
        .map(|(k, (p, d))| (k.as_str(), serde_json::json!({ "path": p, "sha256": d })))
        .collect();
    let outputs = out.written().clone();
    reports(out.json(
        "manifest.json",
        &Manifest {
            inputs,
            parameters: cfg,
            outputs: &outputs,
        },
    ))?;
    Ok(summary)
}

/// Runs every stage. On failure `error.json` is written to the output
/// directory when possible.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunSummary, StageError> {
    let res = run_stages(cfg);
    if let Err(e) = &res {
        let body = serde_json::to_vec_pretty(&e.report()).expect("json");
        if let Err(w) = write_atomic(&cfg.output_dir.join("error.json"), &body) {
            log::warn!("could not write error report: {w}");
        }
    }
    res
}
