//! Paired significance testing of verification-metric differences between
//! two forecast systems.
//!
//! Each metric is viewed as a function of the temporal mean of a
//! per-init-time statistic vector (CRPS, MSE, Brier components, confusion
//! matrices). The test resamples the paired statistic series with a
//! stationary block bootstrap (automatic mean block length), recomposes
//! the metric per resample, and builds a bias-corrected and accelerated
//! confidence interval for the difference; the null of no difference is
//! rejected when the interval excludes zero.

use crate::error::{Error, Result};
use crate::metrics::{rev_from_confusion, ConfusionMatrix};
use crate::numerics::{normal_cdf, normal_quantile, percentile_sorted};
use crate::rng::substream;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Per-init-time statistic vectors with timestamps and a missing-entry
/// mask. Missing entries hold NaN until [`impute_missing`] fills them;
/// the mask keeps recording which entries were imputed.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticSeries {
    timestamps_h: Vec<i64>,
    n_comp: usize,
    /// Row-major: entry k occupies `[k * n_comp, (k + 1) * n_comp)`.
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl StatisticSeries {
    /// Bind statistic rows to timestamps (hours), validating shapes.
    pub fn new(
        timestamps_h: Vec<i64>,
        n_comp: usize,
        values: Vec<f64>,
        missing: Vec<bool>,
    ) -> Result<Self> {
        let n = timestamps_h.len();
        if n == 0 || n_comp == 0 {
            return Err(Error::data("statistic series must be non-empty"));
        }
        if values.len() != n * n_comp {
            return Err(Error::dims(format!(
                "statistic series has {} values for {} entries x {} components",
                values.len(),
                n,
                n_comp
            )));
        }
        if missing.len() != n {
            return Err(Error::dims("missing mask length != series length"));
        }
        if timestamps_h.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::data(
                "statistic series timestamps must be strictly increasing",
            ));
        }
        for k in 0..n {
            if !missing[k] && values[k * n_comp..(k + 1) * n_comp].iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "non-finite statistic at entry {k} not marked missing"
                )));
            }
        }
        Ok(StatisticSeries {
            timestamps_h,
            n_comp,
            values,
            missing,
        })
    }

    /// One-component series from optional scalars (None = missing).
    pub fn from_scalars(timestamps_h: Vec<i64>, scalars: &[Option<f64>]) -> Result<Self> {
        let values = scalars.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let missing = scalars.iter().map(|v| v.is_none()).collect();
        Self::new(timestamps_h, 1, values, missing)
    }

    /// Series from optional fixed-width rows (None = missing).
    pub fn from_rows(timestamps_h: Vec<i64>, rows: &[Option<Vec<f64>>]) -> Result<Self> {
        let n_comp = rows
            .iter()
            .flatten()
            .map(|r| r.len())
            .next()
            .ok_or_else(|| Error::data("statistic series has no present rows"))?;
        if rows.iter().flatten().any(|r| r.len() != n_comp) {
            return Err(Error::dims("statistic rows have inconsistent widths"));
        }
        let mut values = Vec::with_capacity(rows.len() * n_comp);
        for r in rows {
            match r {
                Some(v) => values.extend_from_slice(v),
                None => values.extend(std::iter::repeat(f64::NAN).take(n_comp)),
            }
        }
        let missing = rows.iter().map(|r| r.is_none()).collect();
        Self::new(timestamps_h, n_comp, values, missing)
    }

    /// Series of flattened per-threshold contingency tables
    /// (empty table list = missing entry).
    pub fn from_confusions(
        timestamps_h: Vec<i64>,
        per_init: &[Vec<ConfusionMatrix>],
    ) -> Result<Self> {
        let rows: Vec<Option<Vec<f64>>> = per_init
            .iter()
            .map(|tables| {
                if tables.is_empty() {
                    None
                } else {
                    Some(
                        tables
                            .iter()
                            .flat_map(|cm| [cm.tn, cm.fn_, cm.fp, cm.tp])
                            .collect(),
                    )
                }
            })
            .collect();
        Self::from_rows(timestamps_h, &rows)
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.timestamps_h.len()
    }

    /// True when the series has no entries (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.timestamps_h.is_empty()
    }

    /// Components per entry.
    pub fn n_components(&self) -> usize {
        self.n_comp
    }

    /// Timestamps in hours.
    pub fn timestamps_h(&self) -> &[i64] {
        &self.timestamps_h
    }

    /// Missing/imputed mask.
    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    /// Statistic row of entry `k`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_comp..(k + 1) * self.n_comp]
    }

    fn any_nan(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }

    /// Component-wise sums over all entries.
    fn component_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_comp];
        for k in 0..self.len() {
            for (s, v) in sums.iter_mut().zip(self.row(k)) {
                *s += v;
            }
        }
        sums
    }
}

/// How to pair two statistic series whose init times are offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// Pair each entry of the first series with the second-series entry
    /// this many hours earlier (same lead time, shifted validity).
    Shift(i64),
    /// Pair with the mean of the two second-series entries bracketing the
    /// entry by this many hours (same validity time, lead averaged).
    BracketAverage(i64),
}

/// Align series `b` onto the timestamps of series `a`.
///
/// Returns `(a, b_aligned)` where `b_aligned` carries `a`'s timestamps.
/// Errors when any required `b` entry is absent or when `a`'s timestamps
/// are not uniformly spaced.
pub fn align_series(
    a: &StatisticSeries,
    b: &StatisticSeries,
    mode: AlignMode,
) -> Result<(StatisticSeries, StatisticSeries)> {
    if a.n_comp != b.n_comp {
        return Err(Error::dims("series component widths differ"));
    }
    if a.len() > 1 {
        let dt = a.timestamps_h[1] - a.timestamps_h[0];
        if a.timestamps_h.windows(2).any(|w| w[1] - w[0] != dt) {
            return Err(Error::data(
                "alignment requires uniformly spaced timestamps",
            ));
        }
    }
    let index: HashMap<i64, usize> = b
        .timestamps_h
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    let lookup = |t: i64| -> Result<usize> {
        index.get(&t).copied().ok_or_else(|| {
            Error::data(format!("no pairable entry at {t} h in the second series"))
        })
    };
    let n_comp = a.n_comp;
    let mut values = Vec::with_capacity(a.len() * n_comp);
    let mut missing = Vec::with_capacity(a.len());
    for &t in &a.timestamps_h {
        match mode {
            AlignMode::Shift(h) => {
                let j = lookup(t - h)?;
                values.extend_from_slice(b.row(j));
                missing.push(b.missing[j]);
            }
            AlignMode::BracketAverage(h) => {
                let j0 = lookup(t - h)?;
                let j1 = lookup(t + h)?;
                let miss = b.missing[j0] || b.missing[j1];
                for c in 0..n_comp {
                    values.push(if miss {
                        f64::NAN
                    } else {
                        0.5 * (b.row(j0)[c] + b.row(j1)[c])
                    });
                }
                missing.push(miss);
            }
        }
    }
    let b_aligned = StatisticSeries::new(a.timestamps_h.clone(), n_comp, values, missing)?;
    Ok((a.clone(), b_aligned))
}

/// Fill missing entries by averaging the previous and next present
/// entries. Only single interior gaps are legal; the missing mask is
/// retained so imputed entries stay identifiable.
pub fn impute_missing(series: &StatisticSeries) -> Result<StatisticSeries> {
    let n = series.len();
    let mut out = series.clone();
    for k in 0..n {
        if !series.missing[k] {
            continue;
        }
        if k == 0 || k + 1 == n {
            return Err(Error::data(format!(
                "missing entry at series boundary (index {k}); cannot extrapolate"
            )));
        }
        if series.missing[k - 1] || series.missing[k + 1] {
            return Err(Error::data(format!(
                "consecutive missing entries around index {k}; only single gaps \
                 can be imputed"
            )));
        }
        for c in 0..series.n_comp {
            out.values[k * series.n_comp + c] =
                0.5 * (series.row(k - 1)[c] + series.row(k + 1)[c]);
        }
    }
    Ok(out)
}

/// Automatic mean block length for the stationary bootstrap, from the
/// flat-top lag-window autocovariance pilot estimate with the corrected
/// stationary-bootstrap constant.
///
/// Constant series return 1 by convention. Requires at least 32 entries.
pub fn auto_block_length(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 32 {
        return Err(Error::data(format!(
            "block length selection needs >= 32 entries, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let eps: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let acv = |lag: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..n - lag {
            s += eps[t] * eps[t + lag];
        }
        s / nf
    };
    let var0 = acv(0);
    if var0 <= 0.0 || !var0.is_finite() {
        return Ok(1.0);
    }
    let kn = 5usize.max(nf.log10() as usize);
    let m_max = nf.sqrt().ceil() as usize + kn;
    let b_max = (3.0 * nf.sqrt()).min(nf / 3.0).ceil();
    // Bandwidth: smallest lag followed by kn insignificant sample
    // autocorrelations, doubled.
    let rho_crit = 2.0 * (nf.log10() / nf).sqrt();
    let rho: Vec<f64> = (1..=m_max).map(|k| acv(k) / var0).collect();
    let insignificant: Vec<bool> = rho.iter().map(|r| r.abs() < rho_crit).collect();
    let mut m_hat = m_max;
    for start in 0..m_max.saturating_sub(kn - 1) {
        if insignificant[start..start + kn].iter().all(|&b| b) {
            m_hat = start + 1; // lag index of the first insignificant run
            break;
        }
    }
    let m = (2 * m_hat).min(m_max);
    // Flat-top lag window: 1 on |t| <= 1/2, linear taper to 0 at |t| = 1.
    let lam = |k: usize| -> f64 {
        let t = k as f64 / m as f64;
        if t <= 0.5 {
            1.0
        } else {
            2.0 * (1.0 - t)
        }
    };
    let mut g_hat = 0.0;
    let mut big_g = var0;
    for k in 1..=m {
        let a = acv(k);
        g_hat += 2.0 * lam(k) * k as f64 * a;
        big_g += 2.0 * lam(k) * a;
    }
    let d_sb = 2.0 * big_g * big_g;
    if d_sb <= 0.0 {
        return Ok(1.0);
    }
    let b = ((2.0 * g_hat * g_hat) / d_sb).powf(1.0 / 3.0) * nf.powf(1.0 / 3.0);
    Ok(b.clamp(1.0, b_max))
}

const RESAMPLE_STREAM: u64 = 0x626F_6F74_7374_7261;

/// Fill `buf` with one stationary-bootstrap index stream: geometric blocks
/// of mean `1 / restart_prob`, wrapping around the series end.
fn resample_indices_into(
    buf: &mut Vec<u32>,
    n: usize,
    restart_prob: f64,
    rng: &mut impl Rng,
) {
    buf.clear();
    let mut idx = rng.random_range(0..n);
    buf.push(idx as u32);
    for _ in 1..n {
        if rng.random::<f64>() < restart_prob {
            idx = rng.random_range(0..n);
        } else {
            idx = (idx + 1) % n;
        }
        buf.push(idx as u32);
    }
}

/// Deterministic stationary-bootstrap index streams: `n_resamples` rows of
/// `n` indices each. Row `b` depends only on `(seed, b)`.
pub fn stationary_bootstrap_indices(
    n: usize,
    n_resamples: usize,
    mean_block: f64,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if n == 0 {
        return Err(Error::data("cannot resample an empty series"));
    }
    if n_resamples == 0 {
        return Err(Error::config("number of resamples must be positive"));
    }
    if !(mean_block >= 1.0) {
        return Err(Error::config(format!(
            "mean block length must be >= 1, got {mean_block}"
        )));
    }
    let p = 1.0 / mean_block;
    let mut out = Vec::with_capacity(n_resamples);
    for b in 0..n_resamples {
        let mut rng = substream(seed, &[RESAMPLE_STREAM, b as u64]);
        let mut buf = Vec::with_capacity(n);
        resample_indices_into(&mut buf, n, p, &mut rng);
        out.push(buf);
    }
    Ok(out)
}

/// Stationary-bootstrap resample statistics of a paired series: for each
/// resample, the component means of both series under one shared index
/// stream.
pub fn stationary_bootstrap(
    a: &StatisticSeries,
    b: &StatisticSeries,
    n_resamples: usize,
    mean_block: f64,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if a.len() != b.len() {
        return Err(Error::dims("paired series have different lengths"));
    }
    let indices = stationary_bootstrap_indices(a.len(), n_resamples, mean_block, seed)?;
    Ok(indices
        .iter()
        .map(|idx| (resample_component_means(a, idx), resample_component_means(b, idx)))
        .collect())
}

fn resample_component_means(series: &StatisticSeries, indices: &[u32]) -> Vec<f64> {
    let mut sums = vec![0.0; series.n_comp];
    for &i in indices {
        for (s, v) in sums.iter_mut().zip(series.row(i as usize)) {
            *s += v;
        }
    }
    let nf = indices.len() as f64;
    sums.iter_mut().for_each(|s| *s /= nf);
    sums
}

/// A bias-corrected and accelerated bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcaInterval {
    /// Lower bound.
    pub lo: f64,
    /// Upper bound.
    pub hi: f64,
    /// True when the bias-correction estimate had to be clamped because
    /// every resample fell on one side of the original statistic.
    pub z0_clamped: bool,
}

/// BCa interval at level `1 - alpha` from resample statistics, the
/// original-sample statistic, and delete-one jackknife statistics.
pub fn bca_interval(
    resample_stats: &[f64],
    original_stat: f64,
    jackknife_stats: &[f64],
    alpha: f64,
) -> Result<BcaInterval> {
    let b = resample_stats.len();
    if b < 100 {
        return Err(Error::data(format!(
            "BCa interval needs >= 100 resamples, got {b}"
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let mut sorted = resample_stats.to_vec();
    sorted.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    if sorted[0] == sorted[b - 1] {
        // Degenerate resample distribution: point interval.
        return Ok(BcaInterval {
            lo: sorted[0],
            hi: sorted[0],
            z0_clamped: false,
        });
    }
    // Bias correction from the fraction of resamples below the original.
    let below = resample_stats.iter().filter(|&&v| v < original_stat).count();
    let frac = below as f64 / b as f64;
    let (clamp_lo, clamp_hi) = (1.0 / (2.0 * b as f64), 1.0 - 1.0 / (2.0 * b as f64));
    let z0_clamped = frac < clamp_lo || frac > clamp_hi;
    let z0 = normal_quantile(frac.clamp(clamp_lo, clamp_hi));
    // Acceleration from jackknife skewness.
    let nj = jackknife_stats.len() as f64;
    let jbar = jackknife_stats.iter().sum::<f64>() / nj;
    let (mut s2, mut s3) = (0.0, 0.0);
    for &t in jackknife_stats {
        let d = jbar - t;
        s2 += d * d;
        s3 += d * d * d;
    }
    let accel = if s2 > 0.0 { s3 / (6.0 * s2.powf(1.5)) } else { 0.0 };
    let adjusted = |z_alpha: f64| -> f64 {
        let zs = z0 + z_alpha;
        let denom = 1.0 - accel * zs;
        // Saturates toward 0/1 when the acceleration correction blows up.
        let t = if denom > 0.0 { z0 + zs / denom } else { f64::INFINITY * zs.signum() };
        normal_cdf(t)
    };
    let p_lo = adjusted(normal_quantile(alpha / 2.0));
    let p_hi = adjusted(normal_quantile(1.0 - alpha / 2.0));
    let lo = percentile_sorted(&sorted, (100.0 * p_lo).clamp(0.0, 100.0));
    let hi = percentile_sorted(&sorted, (100.0 * p_hi).clamp(0.0, 100.0));
    Ok(BcaInterval { lo, hi, z0_clamped })
}

/// Which verification metric a statistic series encodes, and how to
/// recompose the metric from component means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MetricKind {
    /// Mean of per-init CRPS values (1 component).
    Crps,
    /// Root of the mean of per-init MSE values (1 component).
    EnsembleMeanRmse,
    /// Brier skill score from per-init (Brier score, base rate) pairs
    /// (2 components).
    BrierSkill,
    /// Threshold-optimized relative economic value from per-init
    /// contingency tables at every ensemble-count threshold
    /// (4 x n_thresholds components).
    RevStar {
        /// Cost/loss ratio the value is evaluated at.
        cost_loss: f64,
    },
}

impl MetricKind {
    /// Stable label for reports.
    pub fn label(&self) -> String {
        match self {
            MetricKind::Crps => "crps".into(),
            MetricKind::EnsembleMeanRmse => "ensemble_mean_rmse".into(),
            MetricKind::BrierSkill => "brier_skill_score".into(),
            MetricKind::RevStar { cost_loss } => format!("rev_star@{cost_loss}"),
        }
    }

    fn check_width(&self, n_comp: usize) -> Result<()> {
        let ok = match self {
            MetricKind::Crps | MetricKind::EnsembleMeanRmse => n_comp == 1,
            MetricKind::BrierSkill => n_comp == 2,
            MetricKind::RevStar { .. } => n_comp % 4 == 0 && n_comp >= 8,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dims(format!(
                "{} expects a different component width than {n_comp}",
                self.label()
            )))
        }
    }
}

fn confusion_at(comps: &[f64], j: usize) -> ConfusionMatrix {
    ConfusionMatrix {
        tn: comps[4 * j],
        fn_: comps[4 * j + 1],
        fp: comps[4 * j + 2],
        tp: comps[4 * j + 3],
    }
}

/// Recompose a metric value from component means.
pub fn metric_from_component_means(kind: MetricKind, comps: &[f64]) -> Result<f64> {
    kind.check_width(comps.len())?;
    match kind {
        MetricKind::Crps => Ok(comps[0]),
        MetricKind::EnsembleMeanRmse => Ok(comps[0].max(0.0).sqrt()),
        MetricKind::BrierSkill => {
            let (bs, rate) = (comps[0], comps[1]);
            let denom = rate * (1.0 - rate);
            if denom <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "Brier skill score undefined at base rate {rate}"
                )));
            }
            Ok(1.0 - bs / denom)
        }
        MetricKind::RevStar { cost_loss } => {
            let n_thr = comps.len() / 4;
            let mut best = f64::NEG_INFINITY;
            for j in 0..n_thr {
                best = best.max(rev_from_confusion(&confusion_at(comps, j), cost_loss)?);
            }
            Ok(best)
        }
    }
}

/// Univariate per-init proxy whose temporal mean tracks the metric, used
/// only for block length selection.
fn proxy_series(kind: MetricKind, series: &StatisticSeries) -> Result<Vec<f64>> {
    kind.check_width(series.n_comp)?;
    let n = series.len();
    let sums = series.component_sums();
    let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    match kind {
        MetricKind::Crps | MetricKind::EnsembleMeanRmse => {
            Ok((0..n).map(|k| series.row(k)[0]).collect())
        }
        MetricKind::BrierSkill => {
            let rate = means[1];
            let denom = rate * (1.0 - rate);
            if denom <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "Brier skill score undefined at base rate {rate}"
                )));
            }
            Ok((0..n).map(|k| 1.0 - series.row(k)[0] / denom).collect())
        }
        MetricKind::RevStar { cost_loss } => {
            // Fixed threshold maximizing the full-sample value, and the
            // full-sample denominator held constant.
            let n_thr = means.len() / 4;
            let (mut best_j, mut best) = (0, f64::NEG_INFINITY);
            for j in 0..n_thr {
                let rev = rev_from_confusion(&confusion_at(&means, j), cost_loss)?;
                if rev > best {
                    best = rev;
                    best_j = j;
                }
            }
            let base = confusion_at(&means, best_j).base_rate();
            let denom = base.min(cost_loss) - base * cost_loss;
            if denom <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "relative economic value undefined at base rate {base}"
                )));
            }
            Ok((0..n)
                .map(|k| {
                    let cm = confusion_at(series.row(k), best_j);
                    let e_forecast = (cm.tp + cm.fp) * cost_loss + cm.fn_;
                    let e_clim = cm.base_rate().min(cost_loss);
                    (e_clim - e_forecast) / denom
                })
                .collect())
        }
    }
}

/// Outcome of a paired bootstrap test on a metric difference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// Metric label.
    pub metric: String,
    /// Full-sample metric of the first system.
    pub value_a: f64,
    /// Full-sample metric of the second system.
    pub value_b: f64,
    /// `value_a - value_b`.
    pub difference: f64,
    /// Lower confidence bound for the difference.
    pub ci_lo: f64,
    /// Upper confidence bound for the difference.
    pub ci_hi: f64,
    /// True when the interval excludes zero.
    pub reject: bool,
    /// Test level.
    pub alpha: f64,
    /// Mean block length used for resampling.
    pub block_length: f64,
    /// Number of bootstrap resamples.
    pub n_resamples: usize,
    /// True when the bias correction was clamped (all resamples on one
    /// side of the original difference).
    pub z0_clamped: bool,
}

/// Test the null of no metric difference between two aligned, imputed
/// statistic series against the two-sided alternative.
pub fn paired_metric_test(
    kind: MetricKind,
    a: &StatisticSeries,
    b: &StatisticSeries,
    alpha: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(Error::dims("paired series have different lengths"));
    }
    if a.timestamps_h != b.timestamps_h {
        return Err(Error::data(
            "series are not aligned: timestamps differ (align first)",
        ));
    }
    if a.any_nan() || b.any_nan() {
        return Err(Error::data(
            "series contain missing values: impute before testing",
        ));
    }
    if n_resamples == 0 {
        return Err(Error::config("number of resamples must be positive"));
    }
    kind.check_width(a.n_comp)?;
    kind.check_width(b.n_comp)?;
    let n = a.len();
    let nf = n as f64;

    // Full-sample values and difference.
    let sums_a = a.component_sums();
    let sums_b = b.component_sums();
    let means_a: Vec<f64> = sums_a.iter().map(|s| s / nf).collect();
    let means_b: Vec<f64> = sums_b.iter().map(|s| s / nf).collect();
    let value_a = metric_from_component_means(kind, &means_a)?;
    let value_b = metric_from_component_means(kind, &means_b)?;
    let difference = value_a - value_b;

    // Block length from the univariate proxy difference series.
    let proxy_a = proxy_series(kind, a)?;
    let proxy_b = proxy_series(kind, b)?;
    let proxy_diff: Vec<f64> = proxy_a.iter().zip(&proxy_b).map(|(x, y)| x - y).collect();
    let block_length = auto_block_length(&proxy_diff)?;
    let restart_prob = 1.0 / block_length;

    // Bootstrap: shared index stream per resample, metric recomposed from
    // resampled component means.
    let resample_diffs: Result<Vec<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|bi| {
            let mut rng = substream(seed, &[RESAMPLE_STREAM, bi as u64]);
            let mut idx = Vec::with_capacity(n);
            resample_indices_into(&mut idx, n, restart_prob, &mut rng);
            let ra = resample_component_means(a, &idx);
            let rb = resample_component_means(b, &idx);
            Ok(metric_from_component_means(kind, &ra)?
                - metric_from_component_means(kind, &rb)?)
        })
        .collect();
    let resample_diffs = resample_diffs?;

    // Delete-one jackknife of the difference for the acceleration term.
    let mut jack = Vec::with_capacity(n);
    let denom = nf - 1.0;
    let mut ja = vec![0.0; a.n_comp];
    let mut jb = vec![0.0; b.n_comp];
    for k in 0..n {
        for (c, slot) in ja.iter_mut().enumerate() {
            *slot = (sums_a[c] - a.row(k)[c]) / denom;
        }
        for (c, slot) in jb.iter_mut().enumerate() {
            *slot = (sums_b[c] - b.row(k)[c]) / denom;
        }
        jack.push(
            metric_from_component_means(kind, &ja)? - metric_from_component_means(kind, &jb)?,
        );
    }

    let interval = bca_interval(&resample_diffs, difference, &jack, alpha)?;
    let reject = !(interval.lo <= 0.0 && 0.0 <= interval.hi);
    Ok(PairedTestResult {
        metric: kind.label(),
        value_a,
        value_b,
        difference,
        ci_lo: interval.lo,
        ci_hi: interval.hi,
        reject,
        alpha,
        block_length,
        n_resamples,
        z0_clamped: interval.z0_clamped,
    })
}
