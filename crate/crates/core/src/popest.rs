//! Gridded population estimates from the tracked panel, and comparison with
//! census counts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fragility::pearson_r;
use crate::geo::{GeoPoint, GridCell, GridSpec};
use crate::homeloc::HomeEstimate;
use crate::trajectory::{NightClock, Trajectory};

#[derive(Debug, Clone)]
pub struct PopulationGrid {
    pub spec: GridSpec,
    pub counts: BTreeMap<GridCell, f64>,
}

impl PopulationGrid {
    pub fn new(spec: GridSpec) -> Self {
        PopulationGrid {
            spec,
            counts: BTreeMap::new(),
        }
    }

    pub fn cell_size_m(&self) -> f64 {
        self.spec.cell_size_m
    }

    pub fn get(&self, c: GridCell) -> f64 {
        self.counts.get(&c).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    /// Raw head count per cell (scale 1), e.g. to build a census from a
    /// full synthetic population.
    pub fn from_points<'a>(spec: GridSpec, points: impl IntoIterator<Item = &'a GeoPoint>) -> Self {
        let mut counts = BTreeMap::new();
        for p in points {
            *counts.entry(spec.cell_of(p)).or_insert(0.0) += 1.0;
        }
        PopulationGrid { spec, counts }
    }
}

fn check_rate(sample_rate: f64) -> Result<()> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::config(
            "sample_rate",
            format!("must lie in (0, 1], got {sample_rate}"),
        ));
    }
    Ok(())
}

/// One location per user, scaled by `1 / sample_rate`.
pub fn estimate_population_grid<'a>(
    user_points: impl IntoIterator<Item = &'a GeoPoint>,
    sample_rate: f64,
    spec: GridSpec,
) -> Result<PopulationGrid> {
    check_rate(sample_rate)?;
    let mut counts: BTreeMap<GridCell, u64> = BTreeMap::new();
    for p in user_points {
        *counts.entry(spec.cell_of(p)).or_default() += 1;
    }
    Ok(PopulationGrid {
        spec,
        counts: counts.into_iter().map(|(c, n)| (c, n as f64 / sample_rate)).collect(),
    })
}

/// Users placed by their estimated home.
pub fn estimate_from_homes(
    homes: &BTreeMap<String, HomeEstimate>,
    sample_rate: f64,
    spec: GridSpec,
) -> Result<PopulationGrid> {
    estimate_population_grid(homes.values().map(|h| &h.home), sample_rate, spec)
}

/// Users placed in the cell holding most of their nighttime fixes (ties to
/// the lowest cell). Users without nighttime fixes are not counted.
pub fn estimate_from_night_fixes(
    trajectories: &BTreeMap<String, Trajectory>,
    clock: NightClock,
    sample_rate: f64,
    spec: GridSpec,
) -> Result<PopulationGrid> {
    check_rate(sample_rate)?;
    let mut counts: BTreeMap<GridCell, u64> = BTreeMap::new();
    for traj in trajectories.values() {
        let mut per_cell: BTreeMap<GridCell, u64> = BTreeMap::new();
        for f in &traj.fixes {
            if clock.night_containing(f.t).is_some() {
                *per_cell.entry(spec.cell_of(&f.pos)).or_default() += 1;
            }
        }
        let best = per_cell
            .iter()
            .fold(None::<(GridCell, u64)>, |acc, (&c, &n)| match acc {
                Some((_, m)) if m >= n => acc,
                _ => Some((c, n)),
            });
        if let Some((c, _)) = best {
            *counts.entry(c).or_default() += 1;
        }
    }
    Ok(PopulationGrid {
        spec,
        counts: counts.into_iter().map(|(c, n)| (c, n as f64 / sample_rate)).collect(),
    })
}

/// Pearson correlation over the union of cells, missing cells counting 0.
pub fn census_correlation(est: &PopulationGrid, census: &PopulationGrid) -> Result<f64> {
    if !est.spec.same_as(&census.spec) {
        return Err(Error::config(
            "cell_size_m",
            "estimate and census grids differ in cell size or origin",
        ));
    }
    let cells: BTreeSet<GridCell> = est.counts.keys().chain(census.counts.keys()).copied().collect();
    if cells.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} cell(s)", cells.len())));
    }
    let x: Vec<f64> = cells.iter().map(|c| est.get(*c)).collect();
    let y: Vec<f64> = cells.iter().map(|c| census.get(*c)).collect();
    pearson_r(&x, &y)
}

pub const CENSUS_HEADER: [&str; 3] = ["x", "y", "population"];
pub const POPGRID_HEADER: [&str; 4] = ["x", "y", "population", "estimated"];

pub fn read_census_csv<R: Read>(reader: R, spec: GridSpec) -> Result<PopulationGrid> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    if !rdr.headers()?.iter().eq(CENSUS_HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "census header must be `{}`",
            CENSUS_HEADER.join(",")
        )));
    }
    let mut counts = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = || Error::Format(format!("census row {}: bad value", i + 1));
        let x: i64 = row[0].parse().map_err(|_| bad())?;
        let y: i64 = row[1].parse().map_err(|_| bad())?;
        let p: f64 = row[2].parse().map_err(|_| bad())?;
        if !(p >= 0.0) || !p.is_finite() {
            return Err(bad());
        }
        *counts.entry(GridCell { x, y }).or_insert(0.0) += p;
    }
    Ok(PopulationGrid { spec, counts })
}

pub fn write_census_csv<W: Write>(writer: W, grid: &PopulationGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CENSUS_HEADER)?;
    for (c, p) in &grid.counts {
        w.write_record([c.x.to_string(), c.y.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Estimated grid next to the census over the union of cells; the
/// `population` column is empty without a census.
pub fn write_popgrid_csv<W: Write>(writer: W, est: &PopulationGrid, census: Option<&PopulationGrid>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POPGRID_HEADER)?;
    let cells: BTreeSet<GridCell> = est
        .counts
        .keys()
        .chain(census.into_iter().flat_map(|c| c.counts.keys()))
        .copied()
        .collect();
    for c in cells {
        w.write_record([
            c.x.to_string(),
            c.y.to_string(),
            census.map(|g| g.get(c).to_string()).unwrap_or_default(),
            est.get(c).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
