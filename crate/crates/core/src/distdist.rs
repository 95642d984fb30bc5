//! Evacuation-distance distributions: log-binned densities and power-law
//! exponent fitting.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evac::IntensityBin;

pub const MIN_FIT_SAMPLES: usize = 100;

/// Probability density on geometrically spaced bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogBinnedPdf {
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
    pub n_samples: usize,
}

impl LogBinnedPdf {
    pub fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.bin_edges.windows(2).map(|w| w[1] - w[0])
    }

    /// Σ density · width; 1 for any non-empty PDF.
    pub fn total_mass(&self) -> f64 {
        self.densities.iter().zip(self.widths()).map(|(d, w)| d * w).sum()
    }
}

fn log_edges(lo: f64, hi: f64, bins_per_decade: u32) -> Vec<f64> {
    let n_bins = (((hi / lo).log10() * bins_per_decade as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut edges: Vec<f64> = (0..n_bins)
        .map(|k| lo * 10f64.powf(k as f64 / bins_per_decade as f64))
        .collect();
    edges.push(hi);
    edges
}

fn bin_of(edges: &[f64], d: f64, bins_per_decade: u32) -> usize {
    let n_bins = edges.len() - 1;
    let mut idx = ((d / edges[0]).log10() * bins_per_decade as f64).floor().max(0.0) as usize;
    idx = idx.min(n_bins - 1);
    while idx > 0 && d < edges[idx] {
        idx -= 1;
    }
    while idx + 1 < n_bins && d >= edges[idx + 1] {
        idx += 1;
    }
    idx
}

/// Log-binned density of the distances inside `d_range` (inclusive).
pub fn distance_pdf(distances: &[f64], bins_per_decade: u32, d_range: (f64, f64)) -> Result<LogBinnedPdf> {
    let (lo, hi) = d_range;
    if bins_per_decade == 0 {
        return Err(Error::config("bins_per_decade", "must be at least 1"));
    }
    if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
        return Err(Error::config("d_range", format!("need 0 < lo < hi, got ({lo}, {hi})")));
    }
    let edges = log_edges(lo, hi, bins_per_decade);
    let mut counts = vec![0usize; edges.len() - 1];
    let mut n = 0usize;
    for &d in distances {
        if d >= lo && d <= hi {
            counts[bin_of(&edges, d, bins_per_decade)] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyDistribution);
    }
    let densities = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, w)| c as f64 / (n as f64 * (w[1] - w[0])))
        .collect();
    Ok(LogBinnedPdf {
        bin_edges: edges,
        densities,
        n_samples: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerLawFit {
    /// Maximum-likelihood exponent of `P(d) = α d^(−γ)`.
    pub gamma: f64,
    /// Density normalisation over `[d_min, d_max]`.
    pub alpha: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Exponent from least squares on the log-log binned density.
    pub gamma_loglog: Option<f64>,
    pub r2_loglog: Option<f64>,
    pub n: usize,
}

/// Mean of `u = ln(d / d_min)` when `d` follows a power law with exponent
/// `1 + beta` truncated to `u ∈ [0, span]` (a truncated exponential in `u`).
fn truncated_log_mean(beta: f64, span: f64) -> f64 {
    let x = beta * span;
    if x.abs() < 1e-6 {
        span / 2.0 - beta * span * span / 12.0
    } else {
        1.0 / beta - span / x.exp_m1()
    }
}

/// Fits `γ` by truncated-Pareto maximum likelihood on `[d_min, d_max]`.
///
/// In log space the law is a truncated exponential, whose likelihood
/// equation is `E[ln(d/d_min)] = sample mean`; the left side is monotone in
/// `γ`, so bisection converges unconditionally (to 1e-12 here).
pub fn fit_power_law(distances: &[f64], d_min: f64, d_max: f64) -> Result<PowerLawFit> {
    if !(d_min > 0.0) || !d_min.is_finite() {
        return Err(Error::config("d_min", format!("must be positive, got {d_min}")));
    }
    if !(d_max > d_min) || !d_max.is_finite() {
        return Err(Error::config(
            "d_max",
            format!("must exceed d_min = {d_min}, got {d_max}"),
        ));
    }
    let kept: Vec<f64> = distances
        .iter()
        .copied()
        .filter(|d| *d >= d_min && *d <= d_max)
        .collect();
    if kept.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: kept.len(),
            need: MIN_FIT_SAMPLES,
        });
    }
    let span = (d_max / d_min).ln();
    let mean_u = kept.iter().map(|d| (d / d_min).ln()).sum::<f64>() / kept.len() as f64;

    let (mut lo, mut hi) = (-1.0 / span, 1.0 / span);
    while truncated_log_mean(lo, span) < mean_u {
        lo *= 2.0;
        if lo * span < -1e6 {
            return Err(Error::DegenerateData("samples pile up at d_max".into()));
        }
    }
    while truncated_log_mean(hi, span) > mean_u {
        hi *= 2.0;
        if hi * span > 1e6 {
            return Err(Error::DegenerateData("samples pile up at d_min".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_log_mean(mid, span) > mean_u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let beta = 0.5 * (lo + hi);
    let alpha = if (beta * span).abs() < 1e-12 {
        1.0 / span
    } else {
        d_min.powf(beta) * beta / (-(-beta * span).exp_m1())
    };

    let (gamma_loglog, r2_loglog) = match distance_pdf(&kept, 10, (d_min, d_max)) {
        Ok(pdf) => loglog_slope(&pdf),
        Err(_) => (None, None),
    };
    Ok(PowerLawFit {
        gamma: beta + 1.0,
        alpha,
        d_min,
        d_max,
        gamma_loglog,
        r2_loglog,
        n: kept.len(),
    })
}

/// Least-squares line through `(ln centre, ln density)` of the non-empty
/// bins; returns the negated slope and r².
fn loglog_slope(pdf: &LogBinnedPdf) -> (Option<f64>, Option<f64>) {
    let pts: Vec<(f64, f64)> = pdf
        .bin_edges
        .windows(2)
        .zip(&pdf.densities)
        .filter(|(_, d)| **d > 0.0)
        .map(|(w, d)| ((w[0] * w[1]).sqrt().ln(), d.ln()))
        .collect();
    if pts.len() < 3 {
        return (None, None);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return (None, None);
    }
    (Some(-sxy / sxx), Some(sxy * sxy / (sxx * syy)))
}

/// Largest L1 distance between any two PDFs, counted only on bins where both
/// have positive density. All PDFs must share bin edges.
pub fn max_pairwise_l1(pdfs: &[&LogBinnedPdf]) -> Result<f64> {
    if pdfs.len() < 2 {
        return Err(Error::NothingToCompare(format!("{} distribution(s)", pdfs.len())));
    }
    if pdfs.windows(2).any(|w| w[0].bin_edges != w[1].bin_edges) {
        return Err(Error::InvalidInput("distributions use different bins".into()));
    }
    let mut worst: f64 = 0.0;
    for i in 0..pdfs.len() {
        for j in (i + 1)..pdfs.len() {
            let l1: f64 = pdfs[i]
                .densities
                .iter()
                .zip(&pdfs[j].densities)
                .zip(pdfs[i].widths())
                .filter(|((a, b), _)| **a > 0.0 && **b > 0.0)
                .map(|((a, b), w)| (a - b).abs() * w)
                .sum();
            worst = worst.max(l1);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseParams {
    pub bins_per_decade: u32,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for CollapseParams {
    fn default() -> Self {
        CollapseParams {
            bins_per_decade: 5,
            d_min: 200.0,
            d_max: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport {
    pub max_l1: f64,
    /// max γ̂ − min γ̂ over bins with enough samples to fit.
    pub gamma_spread: Option<f64>,
    pub fits: BTreeMap<String, PowerLawFit>,
    pub pdfs: BTreeMap<String, LogBinnedPdf>,
}

/// Compares per-intensity-bin distance distributions.
pub fn collapse_check(groups: &BTreeMap<IntensityBin, Vec<f64>>, params: CollapseParams) -> Result<CollapseReport> {
    let mut pdfs = BTreeMap::new();
    let mut fits = BTreeMap::new();
    for (bin, ds) in groups {
        match distance_pdf(ds, params.bins_per_decade, (params.d_min, params.d_max)) {
            Ok(pdf) => {
                pdfs.insert(bin.to_string(), pdf);
            }
            Err(Error::EmptyDistribution) => continue,
            Err(e) => return Err(e),
        }
        if let Ok(fit) = fit_power_law(ds, params.d_min, params.d_max) {
            fits.insert(bin.to_string(), fit);
        }
    }
    let refs: Vec<&LogBinnedPdf> = pdfs.values().collect();
    let max_l1 = max_pairwise_l1(&refs)?;
    let gamma_spread = (fits.len() >= 2).then(|| {
        let (lo, hi) = fits.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
            (lo.min(f.gamma), hi.max(f.gamma))
        });
        hi - lo
    });
    Ok(CollapseReport {
        max_l1,
        gamma_spread,
        fits,
        pdfs,
    })
}

pub const DISTPDF_HEADER: [&str; 4] = ["si_bin", "bin_lo_m", "bin_hi_m", "density"];

pub fn write_distpdf_csv<W: Write>(writer: W, pdfs: &BTreeMap<String, LogBinnedPdf>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DISTPDF_HEADER)?;
    for (bin, pdf) in pdfs {
        for (e, d) in pdf.bin_edges.windows(2).zip(&pdf.densities) {
            w.write_record([bin.as_str(), &e[0].to_string(), &e[1].to_string(), &d.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerLawRecord {
    pub si_bin: String,
    pub gamma: f64,
    pub alpha: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub r2_loglog: Option<f64>,
    pub n: usize,
}

impl PowerLawRecord {
    pub fn new(si_bin: impl Into<String>, fit: &PowerLawFit) -> Self {
        PowerLawRecord {
            si_bin: si_bin.into(),
            gamma: fit.gamma,
            alpha: fit.alpha,
            d_min: fit.d_min,
            d_max: fit.d_max,
            r2_loglog: fit.r2_loglog,
            n: fit.n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bin_density() {
        let pdf = distance_pdf(&[250.0, 260.0, 270.0], 1, (200.0, 20_000.0)).unwrap();
        assert_eq!(pdf.bin_edges, vec![200.0, 2000.0, 20_000.0]);
        assert!((pdf.densities[0] - 1.0 / 1800.0).abs() < 1e-15);
        assert_eq!(pdf.densities[1], 0.0);
        assert!((pdf.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn range_edges_are_inclusive() {
        let pdf = distance_pdf(&[200.0, 1e6, 150.0, 2e6], 5, (200.0, 1e6)).unwrap();
        assert_eq!(pdf.n_samples, 2);
        assert!(*pdf.densities.first().unwrap() > 0.0);
        assert!(*pdf.densities.last().unwrap() > 0.0);
    }

    #[test]
    fn pdf_errors() {
        assert!(matches!(
            distance_pdf(&[10.0], 5, (200.0, 1e6)),
            Err(Error::EmptyDistribution)
        ));
        assert!(distance_pdf(&[300.0], 0, (200.0, 1e6)).is_err());
        assert!(distance_pdf(&[300.0], 5, (1e6, 200.0)).is_err());
    }

    #[test]
    fn fit_errors() {
        let few = vec![500.0; 50];
        assert!(matches!(
            fit_power_law(&few, 200.0, 1e6),
            Err(Error::InsufficientSamples { got: 50, .. })
        ));
        assert!(matches!(fit_power_law(&few, 1e6, 200.0), Err(Error::Config { .. })));
    }

    #[test]
    fn truncated_mean_is_continuous_through_zero() {
        let span = (1e6f64 / 200.0).ln();
        let a = truncated_log_mean(-1e-7, span);
        let b = truncated_log_mean(1e-7, span);
        let c = truncated_log_mean(0.0, span);
        assert!((a - c).abs() < 1e-5 && (b - c).abs() < 1e-5);
        assert!(truncated_log_mean(0.5, span) < truncated_log_mean(0.2, span));
    }

    #[test]
    fn identical_pdfs_have_zero_divergence() {
        let ds: Vec<f64> = (0..500).map(|i| 300.0 * 1.01f64.powi(i)).collect();
        let pdf = distance_pdf(&ds, 5, (200.0, 1e6)).unwrap();
        assert_eq!(max_pairwise_l1(&[&pdf, &pdf.clone()]).unwrap(), 0.0);
        assert!(matches!(max_pairwise_l1(&[&pdf]), Err(Error::NothingToCompare(_))));
    }
}
