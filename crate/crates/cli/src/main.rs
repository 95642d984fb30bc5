use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use shindo::config::{parse_event_time, PipelineConfig, PopSource};
use shindo::distdist::write_distpdf_csv;
use shindo::evac::{
    aggregate_observations, read_evac_csv, read_intensity_csv, read_population_csv, read_rates_csv, write_evac_csv,
    write_rates_csv, EvacObservation, EvacRecord,
};
use shindo::fragility::{fit_mle, loo_validate, predict_evacuees, write_loo_csv, write_prediction_csv};
use shindo::homeloc::write_homes_csv;
use shindo::pipeline::{
    config_digest, detect, distance_analysis, load_inputs, population_grid, prepare, r_sweep, read_json_artifact,
    run_pipeline, write_atomic, write_curve_csv, write_excluded_csv, write_pooled_csv, write_rsweep_csv,
    write_timing_csv, Artifacts, FragilityRecord, Prepared, Stage, StageContext, StageError,
};
use shindo::popest::write_popgrid_csv;
use shindo::synth::{generate_scenario, Preset, ScenarioConfig};
use shindo::{Error, Result};

type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Parser)]
#[command(
    name = "shindo",
    version,
    about = "Post-earthquake evacuation analysis from GPS trajectories"
)]
struct Cli {
    /// Pipeline configuration (TOML). Relative paths inside it are resolved
    /// against the file's directory.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override the configuration file.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    gps: Option<PathBuf>,
    #[arg(long, global = true)]
    lgu: Option<PathBuf>,
    #[arg(long, global = true)]
    intensity: Option<PathBuf>,
    #[arg(long, global = true)]
    census: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Epoch seconds or RFC 3339.
    #[arg(long, global = true)]
    event_time: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    tz_offset_s: Option<i64>,
    /// Evacuation distance threshold in metres.
    #[arg(long, global = true, allow_negative_numbers = true)]
    r_m: Option<f64>,
    #[arg(long, global = true)]
    window_days: Option<u32>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    bandwidth_m: Option<f64>,
    #[arg(long, global = true)]
    min_nights: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    min_si: Option<f64>,
    /// Pool LGUs by intensity before fitting.
    #[arg(long, global = true)]
    binned: bool,
    #[arg(long, global = true, allow_negative_numbers = true)]
    sample_rate: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    cell_size_m: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pop_source: Option<PopSourceArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PopSourceArg {
    Homes,
    NightFixes,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Small,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with ground truth.
    Synth {
        /// Directory to write the scenario into.
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "small")]
        preset: PresetArg,
        /// Scenario TOML; replaces the preset.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Estimate home locations.
    Homes,
    /// Detect evacuations.
    Evac,
    /// Per-LGU and pooled evacuation rates from evac.csv.
    Rates {
        #[arg(long)]
        evac: Option<PathBuf>,
    },
    /// Fit the fragility curve to rates.csv.
    Fit {
        #[arg(long)]
        rates: Option<PathBuf>,
    },
    /// Leave-one-disaster-out validation over several rates files.
    Loo {
        /// NAME=PATH pairs, one per disaster.
        #[arg(required = true, num_args = 2..)]
        datasets: Vec<String>,
    },
    /// Expected evacuees per LGU from a fitted curve.
    Predict {
        #[arg(long)]
        fragility: Option<PathBuf>,
        /// CSV with `lgu_id,population`.
        #[arg(long)]
        population: PathBuf,
    },
    /// Power-law fit of evacuation distances.
    Distfit {
        #[arg(long)]
        evac: Option<PathBuf>,
    },
    /// Refit the curve over the configured r values.
    Rsweep,
    /// Grid population estimate, compared with a census when given.
    Popest,
    /// Plot-ready CSVs for the curve, pooled rates and distance PDFs.
    Report {
        #[arg(long)]
        fragility: Option<PathBuf>,
        #[arg(long)]
        rates: Option<PathBuf>,
        #[arg(long)]
        evac: Option<PathBuf>,
    },
    /// Every stage end to end.
    Run,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut cfg = PipelineConfig::load(path)?;
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [&mut cfg.gps, &mut cfg.lgu, &mut cfg.intensity, &mut cfg.output_dir] {
                resolve(base, p);
            }
            if let Some(c) = cfg.census.as_mut() {
                resolve(base, c);
            }
            cfg
        }
        None => PipelineConfig::default(),
    };
    let o = &cli.overrides;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = o.$flag.clone() { cfg.$field = v; })*
        };
    }
    set!(gps => gps, lgu => lgu, intensity => intensity, out => output_dir, tz_offset_s => tz_offset_s,
         r_m => r_m, window_days => window_days, bandwidth_m => bandwidth_m, min_nights => min_nights,
         min_si => min_si, sample_rate => sample_rate, cell_size_m => cell_size_m, seed => seed);
    if o.census.is_some() {
        cfg.census = o.census.clone();
    }
    if let Some(t) = &o.event_time {
        cfg.event_time = Some(parse_event_time(t)?);
    }
    if o.binned {
        cfg.fit_binned = true;
    }
    if let Some(p) = o.pop_source {
        cfg.pop_source = match p {
            PopSourceArg::Homes => PopSource::Homes,
            PopSourceArg::NightFixes => PopSource::NightFixes,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))
}

fn artifacts(cfg: &PipelineConfig) -> StageResult<Artifacts> {
    Artifacts::new(&cfg.output_dir, config_digest(cfg)).stage(Stage::Reports)
}

fn or_out(cfg: &PipelineConfig, given: &Option<PathBuf>, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn prepared(cfg: &PipelineConfig) -> StageResult<Prepared> {
    prepare(cfg, load_inputs(cfg)?)
}

fn read_evac(cfg: &PipelineConfig, path: &Path) -> StageResult<BTreeMap<String, EvacRecord>> {
    let t = cfg.event_time().stage(Stage::Config)?;
    let first = cfg.clock().first_night_after(t);
    open(path).and_then(|r| read_evac_csv(r, first)).stage(Stage::Ingest)
}

fn read_intensity(cfg: &PipelineConfig) -> StageResult<BTreeMap<String, shindo::evac::Intensity>> {
    open(&cfg.intensity).and_then(read_intensity_csv).stage(Stage::Ingest)
}

fn fit_input(cfg: &PipelineConfig, obs: Vec<EvacObservation>) -> Vec<EvacObservation> {
    let min = shindo::evac::Intensity::from_value(cfg.min_si)
        .map(|i| i.tenths())
        .unwrap_or(0);
    obs.into_iter().filter(|o| o.z.tenths() >= min).collect()
}

fn synth(cfg: &PipelineConfig, dir: &Path, preset: PresetArg, scenario: Option<&Path>) -> StageResult<()> {
    let sc = match scenario {
        Some(p) => ScenarioConfig::load(p).stage(Stage::Config)?,
        None => {
            let preset = match preset {
                PresetArg::Small => Preset::Small,
                PresetArg::Paper => Preset::Paper,
            };
            ScenarioConfig::preset(preset, cfg.seed)
        }
    };
    let s = generate_scenario(&sc).stage(Stage::Config)?;
    s.write_to_dir(dir).stage(Stage::Reports)?;
    // A pipeline config next to the data, with paths relative to it.
    let run_cfg = PipelineConfig {
        gps: "gps.csv".into(),
        lgu: "lgu.csv".into(),
        intensity: "intensity.csv".into(),
        output_dir: "out".into(),
        event_time: Some(sc.event_time),
        tz_offset_s: sc.tz_offset_s,
        dist_min_m: sc.dest_min_m,
        dist_max_m: sc.dest_max_m,
        seed: sc.seed,
        ..PipelineConfig::default()
    };
    write_atomic(&dir.join("shindo.toml"), run_cfg.to_toml().as_bytes()).stage(Stage::Reports)?;
    println!(
        "wrote {} users in {} LGUs to {}",
        s.trajectories.len(),
        sc.lgus.len(),
        dir.display()
    );
    Ok(())
}

fn execute(cli: &Cli) -> StageResult<()> {
    let cfg = load_config(cli).stage(Stage::Config)?;
    let reports = |r: Result<()>| r.stage(Stage::Reports);
    match &cli.command {
        Command::Synth { dir, preset, scenario } => synth(&cfg, dir, *preset, scenario.as_deref())?,
        Command::Homes => {
            let p = prepared(&cfg)?;
            let mut out = artifacts(&cfg)?;
            reports(out.csv("homes.csv", |w| write_homes_csv(w, &p.homes)))?;
            reports(out.csv("excluded.csv", |w| {
                write_excluded_csv(w, &[("homes", &p.home_excluded)])
            }))?;
            println!("{} homes, {} users excluded", p.homes.len(), p.home_excluded.len());
        }
        Command::Evac => {
            let p = prepared(&cfg)?;
            let det = detect(&p, &cfg, cfg.r_m)?;
            let mut out = artifacts(&cfg)?;
            reports(out.csv("evac.csv", |w| write_evac_csv(w, &det.records)))?;
            reports(out.csv("excluded.csv", |w| {
                write_excluded_csv(w, &[("homes", &p.home_excluded), ("evacuation", &det.excluded)])
            }))?;
            reports(out.csv("timing.csv", |w| write_timing_csv(w, &det.records, &p.inputs.intensity)))?;
            let n = det.records.values().filter(|r| r.evacuated).count();
            println!(
                "{n} of {} users evacuated ({} undetermined)",
                det.records.len(),
                det.excluded.len()
            );
        }
        Command::Rates { evac } => {
            let records = read_evac(&cfg, &or_out(&cfg, evac, "evac.csv"))?;
            let intensity = read_intensity(&cfg)?;
            let (obs, missing) = aggregate_observations(&records, &intensity);
            if !missing.is_empty() {
                log::warn!("{} LGUs have users but no intensity", missing.len());
            }
            let mut out = artifacts(&cfg)?;
            reports(out.csv("rates.csv", |w| write_rates_csv(w, &obs)))?;
            reports(out.csv("pooled.csv", |w| write_pooled_csv(w, &fit_input(&cfg, obs.clone()))))?;
            println!("{} LGUs", obs.len());
        }
        Command::Fit { rates } => {
            let obs = open(&or_out(&cfg, rates, "rates.csv"))
                .and_then(read_rates_csv)
                .stage(Stage::Ingest)?;
            let fit = fit_mle(&fit_input(&cfg, obs), &cfg.fit_options()).stage(Stage::Fit)?;
            let mut out = artifacts(&cfg)?;
            reports(out.json("fragility.json", &FragilityRecord::new(&fit, cfg.r_m, cfg.window_days)))?;
            reports(out.csv("curve.csv", |w| {
                write_curve_csv(w, &fit.params, cfg.curve_min_si, cfg.curve_max_si)
            }))?;
            println!(
                "mu={:.4} sigma={:.4} a={:.4} logL={:.3} n={}",
                fit.params.mu, fit.params.sigma, fit.params.a, fit.log_likelihood, fit.n_obs
            );
        }
        Command::Loo { datasets } => {
            let mut sets = BTreeMap::new();
            for d in datasets {
                let (name, path) = d
                    .split_once('=')
                    .ok_or_else(|| Error::config("datasets", format!("`{d}` is not NAME=PATH")))
                    .stage(Stage::Config)?;
                let obs = open(Path::new(path)).and_then(read_rates_csv).stage(Stage::Ingest)?;
                sets.insert(name.to_string(), fit_input(&cfg, obs));
            }
            let rows = loo_validate(&sets, &cfg.fit_options()).stage(Stage::Fit)?;
            let mut out = artifacts(&cfg)?;
            reports(out.csv("loo.csv", |w| write_loo_csv(w, &rows)))?;
            for row in &rows {
                match &row.outcome {
                    Ok(f) => println!(
                        "{}: R={:.3} MAPE={:.2}% mu={:.4} sigma={:.4} a={:.4}",
                        row.left_out, f.eval.r, f.eval.mape, f.params.mu, f.params.sigma, f.params.a
                    ),
                    Err(e) => println!("{}: failed: {e}", row.left_out),
                }
            }
        }
        Command::Predict { fragility, population } => {
            let rec: FragilityRecord =
                read_json_artifact(&or_out(&cfg, fragility, "fragility.json")).stage(Stage::Ingest)?;
            let params = rec.params().stage(Stage::Ingest)?;
            let intensity: BTreeMap<String, f64> =
                read_intensity(&cfg)?.into_iter().map(|(k, z)| (k, z.value())).collect();
            let pop = open(population).and_then(read_population_csv).stage(Stage::Ingest)?;
            let pred = predict_evacuees(&intensity, &pop, &params).stage(Stage::Fit)?;
            if !pred.missing.is_empty() {
                log::warn!("{} LGUs have an intensity but no population", pred.missing.len());
            }
            let mut out = artifacts(&cfg)?;
            reports(out.csv("predicted.csv", |w| write_prediction_csv(w, &pred, &intensity, &pop)))?;
            println!(
                "{:.0} expected evacuees of {:.0} residents",
                pred.total_evacuees, pred.total_population
            );
        }
        Command::Distfit { evac } => {
            let records = read_evac(&cfg, &or_out(&cfg, evac, "evac.csv"))?;
            let intensity = read_intensity(&cfg)?;
            let (dist, pdfs) = distance_analysis(&records, &intensity, &cfg).stage(Stage::DistFit)?;
            for n in &dist.notes {
                log::warn!("distance fit: {n}");
            }
            let mut out = artifacts(&cfg)?;
            reports(out.json("powerlaw.json", &dist))?;
            reports(out.csv("distpdf.csv", |w| write_distpdf_csv(w, &pdfs)))?;
            for f in &dist.fits {
                println!("{}: gamma={:.4} n={}", f.si_bin, f.gamma, f.n);
            }
        }
        Command::Rsweep => {
            let p = prepared(&cfg)?;
            let rows = r_sweep(&p, &cfg)?;
            let mut out = artifacts(&cfg)?;
            reports(out.csv("rsweep.csv", |w| write_rsweep_csv(w, &rows)))?;
            for row in &rows {
                match &row.fit {
                    Ok(f) => println!(
                        "r={} mu={:.4} sigma={:.4} a={:.4}",
                        row.r_m, f.params.mu, f.params.sigma, f.params.a
                    ),
                    Err(e) => println!("r={} failed: {e}", row.r_m),
                }
            }
        }
        Command::Popest => {
            let p = prepared(&cfg)?;
            let (est, census, r) = population_grid(&p, &cfg).stage(Stage::Population)?;
            let mut out = artifacts(&cfg)?;
            reports(out.csv("popgrid.csv", |w| write_popgrid_csv(w, &est, census.as_ref())))?;
            match r {
                Some(r) => println!("estimated population {:.0}, census r={r:.4}", est.total()),
                None => println!("estimated population {:.0}", est.total()),
            }
        }
        Command::Report { fragility, rates, evac } => {
            let rec: FragilityRecord =
                read_json_artifact(&or_out(&cfg, fragility, "fragility.json")).stage(Stage::Ingest)?;
            let params = rec.params().stage(Stage::Ingest)?;
            let obs = open(&or_out(&cfg, rates, "rates.csv"))
                .and_then(read_rates_csv)
                .stage(Stage::Ingest)?;
            let records = read_evac(&cfg, &or_out(&cfg, evac, "evac.csv"))?;
            let intensity = read_intensity(&cfg)?;
            let (_, pdfs) = distance_analysis(&records, &intensity, &cfg).stage(Stage::DistFit)?;
            let mut out = artifacts(&cfg)?;
            reports(out.csv("curve.csv", |w| {
                write_curve_csv(w, &params, cfg.curve_min_si, cfg.curve_max_si)
            }))?;
            reports(out.csv("pooled.csv", |w| write_pooled_csv(w, &fit_input(&cfg, obs))))?;
            reports(out.csv("distpdf.csv", |w| write_distpdf_csv(w, &pdfs)))?;
            println!(
                "wrote curve.csv, pooled.csv, distpdf.csv to {}",
                cfg.output_dir.display()
            );
        }
        Command::Run => {
            let summary = run_pipeline(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serialises")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
