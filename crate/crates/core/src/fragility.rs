//! Lognormal fragility curve of evacuation probability against seismic
//! intensity, `p(z) = a · Φ((ln z − μ) / σ)`.
//!
//! Parameters are fitted by maximising the per-LGU binomial log-likelihood
//!
//! ```text
//! ℓ(μ, σ, a) = Σ_i [ M*_i ln p(z_i) + (M_i − M*_i) ln(1 − p(z_i)) ]
//! ```
//!
//! with `p` clipped to `[1e-9, 1 − 1e-9]`. The optimiser is deterministic: an
//! exhaustive coarse grid over `μ ∈ [1.0, 2.5]`, `σ ∈ [0.01, 1.0]`,
//! `a ∈ [0.05, 1.0]` followed by Nelder–Mead refinement from the best grid
//! point. Refinement only ever accepts improvements, so the reported optimum
//! is never worse than any grid point.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evac::{pool_by_intensity, EvacObservation};

pub const P_CLIP: f64 = 1e-9;

pub const MU_RANGE: (f64, f64) = (1.0, 2.5);
pub const SIGMA_RANGE: (f64, f64) = (0.01, 1.0);
pub const A_RANGE: (f64, f64) = (0.05, 1.0);

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragilityParams {
    pub mu: f64,
    pub sigma: f64,
    pub a: f64,
}

impl FragilityParams {
    pub fn new(mu: f64, sigma: f64, a: f64) -> Result<Self> {
        let p = FragilityParams { mu, sigma, a };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::InvalidInput(format!("mu must be finite, got {}", self.mu)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::InvalidInput(format!("a must lie in (0, 1], got {}", self.a)));
        }
        Ok(())
    }

    /// Intensity at which the curve reaches half its ceiling.
    pub fn median_intensity(&self) -> f64 {
        self.mu.exp()
    }

    fn eval_unchecked(&self, z: f64) -> f64 {
        self.a * std_normal_cdf((z.ln() - self.mu) / self.sigma)
    }
}

/// Evacuation probability at intensity `z`.
pub fn frag_eval(z: f64, params: &FragilityParams) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::InvalidInput(format!("intensity must be > 0, got {z}")));
    }
    Ok(params.eval_unchecked(z))
}

/// Binomial log-likelihood of the observations under `params`.
pub fn log_likelihood(params: &FragilityParams, obs: &[EvacObservation]) -> f64 {
    obs.iter()
        .map(|o| {
            let p = params.eval_unchecked(o.z.value()).clamp(P_CLIP, 1.0 - P_CLIP);
            let hits = o.m_star as f64;
            let misses = (o.m - o.m_star) as f64;
            hits * p.ln() + misses * (-p).ln_1p()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Pool LGUs sharing an intensity before fitting.
    pub binned: bool,
    /// Refinement stops once the simplex's log-likelihood spread is below this.
    pub ll_tol: f64,
    pub max_iter: usize,
    pub grid_mu: usize,
    pub grid_sigma: usize,
    pub grid_a: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            binned: false,
            ll_tol: 1e-6,
            max_iter: 20_000,
            grid_mu: 61,
            grid_sigma: 33,
            grid_a: 20,
        }
    }
}

/// The coarse search grid, in index order (μ slowest, a fastest). σ is
/// spaced geometrically.
pub fn coarse_grid(opts: &FitOptions) -> Vec<FragilityParams> {
    let lin = |lo: f64, hi: f64, n: usize, i: usize| {
        if n <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let geo = |lo: f64, hi: f64, n: usize, i: usize| {
        if n <= 1 {
            lo
        } else {
            lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(opts.grid_mu * opts.grid_sigma * opts.grid_a);
    for i in 0..opts.grid_mu {
        for j in 0..opts.grid_sigma {
            for k in 0..opts.grid_a {
                out.push(FragilityParams {
                    mu: lin(MU_RANGE.0, MU_RANGE.1, opts.grid_mu, i),
                    sigma: geo(SIGMA_RANGE.0, SIGMA_RANGE.1, opts.grid_sigma, j),
                    a: lin(A_RANGE.0, A_RANGE.1, opts.grid_a, k),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: FragilityParams,
    pub log_likelihood: f64,
    /// Pearson correlation between fitted and observed per-observation rates.
    pub r: Option<f64>,
    /// Relative MAPE in percent (zero observed rates skipped).
    pub mape: Option<f64>,
    /// Mean absolute error in percentage points.
    pub mape_pp: f64,
    pub n_obs: usize,
}

fn check_fit_input(obs: &[EvacObservation]) -> Result<()> {
    let zs: BTreeSet<_> = obs.iter().map(|o| o.z).collect();
    if obs.len() < 3 || zs.len() < 2 {
        return Err(Error::Unidentifiable(format!(
            "{} observations over {} distinct intensities; need at least 3 over 2",
            obs.len(),
            zs.len()
        )));
    }
    if obs.iter().all(|o| o.m_star == 0) {
        return Err(Error::DegenerateData("no evacuees in any observation".into()));
    }
    if obs.iter().all(|o| o.m_star == o.m) {
        return Err(Error::DegenerateData(
            "every user evacuated in every observation".into(),
        ));
    }
    Ok(())
}

/// Maximum-likelihood fit of `(μ, σ, a)`.
pub fn fit_mle(obs: &[EvacObservation], opts: &FitOptions) -> Result<FitReport> {
    let usable: Vec<EvacObservation> = obs.iter().filter(|o| o.m > 0).cloned().collect();
    let data = if opts.binned {
        pool_by_intensity(&usable)
    } else {
        usable
    };
    check_fit_input(&data)?;

    let grid = coarse_grid(opts);
    let lls: Vec<f64> = grid.par_iter().map(|p| log_likelihood(p, &data)).collect();
    let mut best = 0;
    for (i, &ll) in lls.iter().enumerate() {
        if ll > lls[best] {
            best = i;
        }
    }
    let start = grid[best];

    let objective = |x: &[f64; 3]| -> f64 {
        let (mu, sigma, a) = (x[0], x[1].exp(), x[2]);
        if !(a > 0.0 && a <= 1.0) || !sigma.is_finite() || sigma <= 0.0 {
            return f64::INFINITY;
        }
        -log_likelihood(&FragilityParams { mu, sigma, a }, &data)
    };
    let x0 = [start.mu, start.sigma.ln(), start.a];
    let steps = [0.05, 0.2, if start.a + 0.05 <= 1.0 { 0.05 } else { -0.05 }];
    let (mut x, mut fx) = nelder_mead(&objective, x0, steps, opts.ll_tol, opts.max_iter);
    // one restart from the incumbent guards against a collapsed simplex
    let (x2, fx2) = nelder_mead(&objective, x, [0.01, 0.05, -0.01], opts.ll_tol, opts.max_iter);
    if fx2 < fx {
        x = x2;
        fx = fx2;
    }
    let params = if fx <= -lls[best] {
        FragilityParams {
            mu: x[0],
            sigma: x[1].exp(),
            a: x[2],
        }
    } else {
        start
    };
    let log_likelihood = log_likelihood(&params, &data);
    let (pred, observed) = predicted_and_observed(&params, &data);
    Ok(FitReport {
        params,
        log_likelihood,
        r: pearson_r(&pred, &observed).ok(),
        mape: mape(&pred, &observed).ok(),
        mape_pp: mape_pp(&pred, &observed)?,
        n_obs: data.len(),
    })
}

fn predicted_and_observed(params: &FragilityParams, obs: &[EvacObservation]) -> (Vec<f64>, Vec<f64>) {
    obs.iter()
        .filter_map(|o| o.rate().map(|r| (params.eval_unchecked(o.z.value()), r)))
        .unzip()
}

/// Minimises `f` with the Nelder–Mead simplex method (reflection 1,
/// expansion 2, contraction 1/2, shrink 1/2). Stops when both the spread of
/// function values is below `f_tol` and the simplex has collapsed to 1e-10 in
/// every coordinate, or after `max_iter` iterations.
fn nelder_mead<F: Fn(&[f64; 3]) -> f64>(
    f: &F,
    x0: [f64; 3],
    steps: [f64; 3],
    f_tol: f64,
    max_iter: usize,
) -> ([f64; 3], f64) {
    const N: usize = 3;
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += steps[i];
        simplex.push((x, f(&x)));
    }
    let order =
        |s: &mut Vec<([f64; N], f64)>| s.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    for _ in 0..max_iter {
        order(&mut simplex);
        let spread_f = simplex[N].1 - simplex[0].1;
        let spread_x = (0..N)
            .map(|k| {
                simplex
                    .iter()
                    .map(|v| (v.0[k] - simplex[0].0[k]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread_f.is_finite() && spread_f <= f_tol && spread_x <= 1e-10 {
            break;
        }
        let mut centroid = [0.0; N];
        for v in &simplex[..N] {
            for (c, x) in centroid.iter_mut().zip(v.0) {
                *c += x / N as f64;
            }
        }
        let along = |t: f64| {
            let mut x = [0.0; N];
            for k in 0..N {
                x[k] = centroid[k] + t * (simplex[N].0[k] - centroid[k]);
            }
            x
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[N].1 {
                let x = along(-0.5);
                (x, f(&x))
            } else {
                let x = along(0.5);
                (x, f(&x))
            };
            if fc < simplex[N].1.min(fr) {
                simplex[N] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    for (x, b) in v.0.iter_mut().zip(best) {
                        *x = b + 0.5 * (*x - b);
                    }
                    v.1 = f(&v.0);
                }
            }
        }
    }
    order(&mut simplex);
    simplex[0]
}

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean absolute percentage error, `mean(|pred − obs| / obs) × 100`.
/// Entries with a zero observed rate are skipped (and logged).
pub fn mape(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch {} vs {}",
            pred.len(),
            obs.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, o) in pred.iter().zip(obs) {
        if *o > 0.0 {
            sum += (p - o).abs() / o;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMape);
    }
    if n < obs.len() {
        log::warn!("MAPE: skipped {} zero-rate entries", obs.len() - n);
    }
    Ok(sum / n as f64 * 100.0)
}

/// Mean absolute error of rates expressed in percentage points.
pub fn mape_pp(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!(
            "need equal non-empty lengths, got {} and {}",
            pred.len(),
            obs.len()
        )));
    }
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / pred.len() as f64 * 100.0)
}

/// Accuracy of a curve on held-out observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub r: f64,
    pub mape: f64,
    pub mape_pp: f64,
}

pub fn evaluate(params: &FragilityParams, obs: &[EvacObservation]) -> Result<Evaluation> {
    let (pred, observed) = predicted_and_observed(params, obs);
    Ok(Evaluation {
        r: pearson_r(&pred, &observed)?,
        mape: mape(&pred, &observed)?,
        mape_pp: mape_pp(&pred, &observed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooFit {
    pub params: FragilityParams,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooRow {
    pub left_out: String,
    pub outcome: std::result::Result<LooFit, String>,
}

/// Leave-one-disaster-out validation: each disaster is predicted by a curve
/// fitted on all the others.
pub fn loo_validate(datasets: &BTreeMap<String, Vec<EvacObservation>>, opts: &FitOptions) -> Result<Vec<LooRow>> {
    if datasets.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-out needs at least 2 disasters, got {}",
            datasets.len()
        )));
    }
    Ok(datasets
        .iter()
        .map(|(left_out, test)| {
            let train: Vec<EvacObservation> = datasets
                .iter()
                .filter(|(k, _)| *k != left_out)
                .flat_map(|(_, v)| v.iter().cloned())
                .collect();
            let outcome = fit_mle(&train, opts)
                .and_then(|fit| {
                    let test = if opts.binned {
                        pool_by_intensity(test)
                    } else {
                        test.clone()
                    };
                    Ok(LooFit {
                        params: fit.params,
                        eval: evaluate(&fit.params, &test)?,
                    })
                })
                .map_err(|e| e.to_string());
            LooRow {
                left_out: left_out.clone(),
                outcome,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub per_lgu: BTreeMap<String, f64>,
    pub total_evacuees: f64,
    pub total_population: f64,
    /// LGUs with an intensity but no population entry.
    pub missing: Vec<String>,
}

/// Expected evacuees per LGU: population × p(z).
pub fn predict_evacuees(
    intensity: &BTreeMap<String, f64>,
    population: &BTreeMap<String, f64>,
    params: &FragilityParams,
) -> Result<Prediction> {
    params.validate()?;
    let mut per_lgu = BTreeMap::new();
    let mut missing = Vec::new();
    let (mut total_evacuees, mut total_population) = (0.0, 0.0);
    for (lgu, &z) in intensity {
        let Some(&pop) = population.get(lgu) else {
            missing.push(lgu.clone());
            continue;
        };
        if !(pop >= 0.0) || !pop.is_finite() {
            return Err(Error::InvalidInput(format!("population of `{lgu}` is {pop}")));
        }
        let e = pop * frag_eval(z, params)?;
        per_lgu.insert(lgu.clone(), e);
        total_evacuees += e;
        total_population += pop;
    }
    Ok(Prediction {
        per_lgu,
        total_evacuees,
        total_population,
        missing,
    })
}

/// Curve sampled every `step` on `[lo, hi]` (inclusive, to within rounding).
pub fn curve_points(params: &FragilityParams, lo: f64, hi: f64, step: f64) -> Vec<(f64, f64)> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| {
            let z = ((lo + step * i as f64) * 1e6).round() / 1e6;
            (z, params.eval_unchecked(z))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r_m: f64,
    pub observations: Vec<EvacObservation>,
    pub fit: std::result::Result<FitReport, String>,
}

/// Refits the curve for each threshold in `r_values`. `observe` produces the
/// per-LGU observations for a given threshold.
pub fn r_sensitivity_sweep<F>(r_values: &[f64], mut observe: F, opts: &FitOptions) -> Result<Vec<SweepRow>>
where
    F: FnMut(f64) -> Result<Vec<EvacObservation>>,
{
    if r_values.is_empty() {
        return Err(Error::config("r_values", "must not be empty"));
    }
    if r_values.iter().any(|r| !(*r > 0.0)) || r_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("r_values", "must be positive and strictly ascending"));
    }
    r_values
        .iter()
        .map(|&r_m| {
            let observations = observe(r_m)?;
            let fit = fit_mle(&observations, opts).map_err(|e| e.to_string());
            Ok(SweepRow { r_m, observations, fit })
        })
        .collect()
}

pub const PREDICTION_HEADER: [&str; 4] = ["lgu_id", "si", "population", "expected_evacuees"];

pub fn write_prediction_csv<W: Write>(
    writer: W,
    pred: &Prediction,
    intensity: &BTreeMap<String, f64>,
    population: &BTreeMap<String, f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREDICTION_HEADER)?;
    for (lgu, e) in &pred.per_lgu {
        w.write_record([
            lgu.as_str(),
            &intensity[lgu].to_string(),
            &population[lgu].to_string(),
            &e.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const LOO_HEADER: [&str; 8] = ["left_out", "R", "MAPE", "mu", "sigma", "a", "MAPE_pp", "status"];

pub fn write_loo_csv<W: Write>(writer: W, rows: &[LooRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LOO_HEADER)?;
    for row in rows {
        match &row.outcome {
            Ok(f) => w.write_record([
                row.left_out.as_str(),
                &format!("{:.6}", f.eval.r),
                &format!("{:.6}", f.eval.mape),
                &format!("{:.6}", f.params.mu),
                &format!("{:.6}", f.params.sigma),
                &format!("{:.6}", f.params.a),
                &format!("{:.6}", f.eval.mape_pp),
                "ok",
            ])?,
            Err(e) => w.write_record([row.left_out.as_str(), "", "", "", "", "", "", &format!("failed: {e}")])?,
        }
    }
    w.flush()?;
    Ok(())
}
