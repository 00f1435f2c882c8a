//! Empirical ergodicity and mixing diagnostics.
//!
//! True beta-mixing coefficients are total-variation distances between
//! conditional laws and are not estimable from one trajectory without density
//! estimation, so these diagnostics work with observable surrogates: the
//! autocorrelation decay of a fixed observable, the residual within-block
//! dependence after interleaved sub-sampling, the occupancy histogram against
//! the stationary law, and a quadratic-variation probe of the diffusion
//! scale.
//!
//! The sample set for autocorrelation and block splitting is the first `N`
//! snapshot indices `{0, .., N-1}` of the observation set, so the interleaved
//! blocks partition exactly the index set that the lag-1 statistics are
//! computed on.

use ndarray::Array2;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::sim::{fmt_f64, ObservationSet};
use crate::torus::wrap_coord;

/// Normalized autocorrelation of an observable along the trajectory, plus an
/// exponential-decay fit.
#[derive(Debug, Clone, Serialize)]
pub struct AutocorrelationReport {
    /// Lags in units of the sampling step tau.
    pub lags: Vec<usize>,
    /// Normalized autocorrelation; entry 0 is exactly 1.
    pub values: Vec<f64>,
    /// Decay rate per unit of model time from a least-squares fit of
    /// `log |rho|` against `lag * tau`, over the leading lags with
    /// `|rho| > 0.02`. Zero when fewer than two lags qualify.
    pub fitted_rate: f64,
    /// Coefficient of determination of that fit.
    pub fit_quality: f64,
    pub tau: f64,
}

fn observable_series(
    obs: &ObservationSet,
    observable: &dyn Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let n = obs.num_increments();
    let d = obs.dim();
    let mut wrapped = vec![0.0; d];
    let mut series = Vec::with_capacity(n);
    for k in 0..n {
        for i in 0..d {
            wrapped[i] = wrap_coord(obs.positions()[[k, i]]);
        }
        series.push(observable(&wrapped));
    }
    series
}

fn ols(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

/// Empirical autocorrelation of `observable` over wrapped positions at lags
/// `0..=max_lag`.
///
/// Uses the biased normalization (divide by `N`), which keeps every value in
/// `[-1, 1]`.
pub fn autocorrelation(
    obs: &ObservationSet,
    observable: &dyn Fn(&[f64]) -> f64,
    max_lag: usize,
) -> Result<AutocorrelationReport> {
    let n = obs.num_increments();
    if max_lag >= n / 4 {
        return Err(Error::InvalidInput(format!(
            "autocorrelation: max_lag {max_lag} must be below N/4 = {}",
            n / 4
        )));
    }
    let series = observable_series(obs, observable);
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let var = centered.iter().map(|c| c * c).sum::<f64>() / n as f64;
    if var <= f64::EPSILON * (mean * mean + 1.0) {
        return Err(Error::UndefinedCorrelation);
    }
    let mut values = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let mut acc = 0.0;
        for k in 0..n - lag {
            acc += centered[k] * centered[k + lag];
        }
        values.push(acc / n as f64 / var);
    }
    values[0] = 1.0;

    let tau = obs.tau();
    let fit_points: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .take_while(|(_, v)| v.abs() > 0.02)
        .map(|(l, v)| (l as f64 * tau, v.abs().ln()))
        .collect();
    let (fitted_rate, fit_quality) = if fit_points.len() >= 2 {
        let (slope, _, r2) = ols(&fit_points);
        (-slope, r2)
    } else {
        (0.0, 0.0)
    };
    Ok(AutocorrelationReport {
        lags: (0..=max_lag).collect(),
        values,
        fitted_rate,
        fit_quality,
        tau,
    })
}

/// Interleaved split of the first `N` snapshot indices into `l` blocks;
/// block `a` holds indices `a, a+l, a+2l, ...`, so consecutive samples in a
/// block are `l * tau` apart in model time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSplit {
    /// Number of blocks.
    pub l: usize,
    /// Block length.
    pub n: usize,
    /// Trailing samples dropped so that `l` divides the used range.
    pub dropped: usize,
    pub blocks: Vec<Vec<usize>>,
}

pub fn block_split(obs: &ObservationSet, l: usize) -> Result<BlockSplit> {
    let total = obs.num_increments();
    if l == 0 || l > total {
        return Err(Error::InvalidInput(format!(
            "block_split: l = {l} must be in 1..={total}"
        )));
    }
    let n = total / l;
    let dropped = total - n * l;
    let blocks = (0..l)
        .map(|a| (0..n).map(|k| k * l + a).collect())
        .collect();
    Ok(BlockSplit {
        l,
        n,
        dropped,
        blocks,
    })
}

/// Mean within-block lag-1 autocorrelation for each requested `l`.
///
/// Samples inside one block are `l * tau` apart, so this profile tracks the
/// residual dependence after sub-sampling; it should fall towards zero as
/// `l` grows for a geometrically mixing process.
pub fn block_dependence_profile(
    obs: &ObservationSet,
    observable: &dyn Fn(&[f64]) -> f64,
    l_values: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let series = observable_series(obs, observable);
    let mut profile = Vec::with_capacity(l_values.len());
    for &l in l_values {
        let split = block_split(obs, l)?;
        if split.n < 2 {
            return Err(Error::InvalidInput(format!(
                "block_dependence_profile: l = {l} leaves blocks of length {} (< 2)",
                split.n
            )));
        }
        let mut acc = 0.0;
        let mut used = 0usize;
        for block in &split.blocks {
            let vals: Vec<f64> = block.iter().map(|&i| series[i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let c: Vec<f64> = vals.iter().map(|v| v - m).collect();
            let var = c.iter().map(|v| v * v).sum::<f64>();
            if var <= 0.0 {
                continue;
            }
            let lag1: f64 = c.windows(2).map(|w| w[0] * w[1]).sum();
            acc += lag1 / var;
            used += 1;
        }
        if used == 0 {
            return Err(Error::UndefinedCorrelation);
        }
        profile.push((l, acc / used as f64));
    }
    Ok(profile)
}

/// Occupancy of wrapped positions on a uniform grid, compared with the
/// uniform law.
#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    pub bins_per_axis: usize,
    pub dim: usize,
    pub counts: Vec<u64>,
    /// `max |count / expected - 1|` over bins.
    pub max_rel_deviation: f64,
    /// Pearson chi-square against the uniform expectation.
    pub chi_square: f64,
    pub total: u64,
}

pub fn stationarity_test(obs: &ObservationSet, bins_per_axis: usize) -> Result<StationarityReport> {
    if bins_per_axis < 2 {
        return Err(Error::InvalidInput(
            "stationarity_test: bins_per_axis must be at least 2".into(),
        ));
    }
    let d = obs.dim();
    let nbins = bins_per_axis.pow(d as u32);
    let mut counts = vec![0u64; nbins];
    for row in obs.positions().outer_iter() {
        let mut idx = 0usize;
        for &c in row.iter() {
            let b = ((wrap_coord(c) * bins_per_axis as f64).floor() as usize)
                .min(bins_per_axis - 1);
            idx = idx * bins_per_axis + b;
        }
        counts[idx] += 1;
    }
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / nbins as f64;
    let mut max_rel = 0.0f64;
    let mut chi2 = 0.0f64;
    for &c in &counts {
        let dev = c as f64 / expected - 1.0;
        max_rel = max_rel.max(dev.abs());
        chi2 += (c as f64 - expected) * (c as f64 - expected) / expected;
    }
    Ok(StationarityReport {
        bins_per_axis,
        dim: d,
        counts,
        max_rel_deviation: max_rel,
        chi_square: chi2,
        total,
    })
}

/// Frobenius norm of `mean(dx dx^T / (2 tau)) - mean(D(x_wrapped))` over the
/// increments; O(tau) discretization bias plus Monte-Carlo error when the
/// model matches the data.
pub fn quadratic_variation_probe(obs: &ObservationSet, model: &dyn SdeModel) -> Result<f64> {
    let n = obs.num_increments();
    if n < 100 {
        return Err(Error::InvalidInput(format!(
            "quadratic_variation_probe: needs at least 100 increments, got {n}"
        )));
    }
    let d = obs.dim();
    let tau = obs.tau();
    let mut qv = Array2::<f64>::zeros((d, d));
    let mut dmean = Array2::<f64>::zeros((d, d));
    let mut wrapped = vec![0.0; d];
    for k in 0..n {
        let inc = obs.increment(k);
        for i in 0..d {
            for j in 0..d {
                qv[[i, j]] += inc[i] * inc[j] / (2.0 * tau);
            }
        }
        for i in 0..d {
            wrapped[i] = wrap_coord(obs.positions()[[k, i]]);
        }
        dmean += &model.diffusion(&wrapped);
    }
    let diff = (qv - dmean) / n as f64;
    Ok(diff.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Summary emitted by the `diagnose` subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsSummary {
    pub autocorrelation_rate: f64,
    pub autocorrelation_r2: f64,
    pub stationarity_max_rel_deviation: f64,
    pub stationarity_chi_square: f64,
    pub qv_discrepancy: f64,
    pub block_profile: Vec<(usize, f64)>,
}

pub fn write_autocorrelation_csv(report: &AutocorrelationReport, path: &Path) -> Result<()> {
    let mut out = String::from("lag,value\n");
    for (l, v) in report.lags.iter().zip(&report.values) {
        let _ = writeln!(out, "{l},{}", fmt_f64(*v));
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

pub fn write_occupancy_csv(report: &StationarityReport, path: &Path) -> Result<()> {
    let mut out = String::from("bin,count\n");
    for (b, c) in report.counts.iter().enumerate() {
        let _ = writeln!(out, "{b},{c}");
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

pub fn write_summary_json(summary: &DiagnosticsSummary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, text).map_err(Error::io(path))
}
