//! Probabilistic verification metrics for ensemble forecasts.
//!
//! All scores follow the same averaging scheme: an unweighted mean over
//! valid initialization times of an area-weighted mean over grid cells,
//! with weights normalized to unit mean. Computations are in double
//! precision regardless of the storage precision of the inputs.

use crate::error::{Error, Result};
use crate::grid::AreaWeights;
use crate::numerics::percentile_sorted;
use crate::rng::unit_uniform;
use serde::{Deserialize, Serialize};

/// Identity of a verified quantity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BatchMeta {
    /// Variable short name.
    pub variable: String,
    /// Pressure level in hPa, absent for single-level variables.
    pub level_hpa: Option<u16>,
    /// Forecast lead time in hours.
    pub lead_time_h: i64,
}

/// An ensemble forecast batch: `n_members x n_inits x n_cells` values with
/// a per-init validity mask.
#[derive(Debug, Clone)]
pub struct EnsembleBatch {
    /// What is being forecast.
    pub meta: BatchMeta,
    n_members: usize,
    n_inits: usize,
    n_cells: usize,
    /// Member-major values: index `(m * n_inits + k) * n_cells + i`.
    values: Vec<f64>,
    /// Per-init validity; masked-out inits are skipped by every metric.
    init_mask: Vec<bool>,
}

impl EnsembleBatch {
    /// Bind values to dimensions, checking length and mask consistency.
    pub fn new(
        meta: BatchMeta,
        n_members: usize,
        n_inits: usize,
        n_cells: usize,
        values: Vec<f64>,
        init_mask: Vec<bool>,
    ) -> Result<Self> {
        if n_members == 0 || n_inits == 0 || n_cells == 0 {
            return Err(Error::data("ensemble batch dimensions must be positive"));
        }
        if values.len() != n_members * n_inits * n_cells {
            return Err(Error::dims(format!(
                "ensemble batch has {} values for {}x{}x{}",
                values.len(),
                n_members,
                n_inits,
                n_cells
            )));
        }
        if init_mask.len() != n_inits {
            return Err(Error::dims("init mask length != n_inits"));
        }
        if !init_mask.iter().any(|&v| v) {
            return Err(Error::data("all init times are masked out"));
        }
        Ok(EnsembleBatch {
            meta,
            n_members,
            n_inits,
            n_cells,
            values,
            init_mask,
        })
    }

    /// Batch with all inits valid.
    pub fn dense(
        meta: BatchMeta,
        n_members: usize,
        n_inits: usize,
        n_cells: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mask = vec![true; n_inits];
        Self::new(meta, n_members, n_inits, n_cells, values, mask)
    }

    /// Ensemble size M.
    pub fn n_members(&self) -> usize {
        self.n_members
    }

    /// Number of initialization times K.
    pub fn n_inits(&self) -> usize {
        self.n_inits
    }

    /// Number of grid cells.
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Per-init validity mask.
    pub fn init_mask(&self) -> &[bool] {
        &self.init_mask
    }

    /// Value of member `m` at init `k`, cell `i`.
    #[inline]
    pub fn value(&self, m: usize, k: usize, i: usize) -> f64 {
        self.values[(m * self.n_inits + k) * self.n_cells + i]
    }

    /// Field of one member at one init.
    pub fn member_field(&self, m: usize, k: usize) -> &[f64] {
        let start = (m * self.n_inits + k) * self.n_cells;
        &self.values[start..start + self.n_cells]
    }

    /// Mutable field of one member at one init.
    pub fn member_field_mut(&mut self, m: usize, k: usize) -> &mut [f64] {
        let start = (m * self.n_inits + k) * self.n_cells;
        &mut self.values[start..start + self.n_cells]
    }

    /// Ensemble mean at (k, i).
    #[inline]
    pub fn mean(&self, k: usize, i: usize) -> f64 {
        let mut s = 0.0;
        for m in 0..self.n_members {
            s += self.value(m, k, i);
        }
        s / self.n_members as f64
    }
}

/// A verifying analysis batch: `n_inits x n_cells` values with a validity
/// mask.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    /// What is being verified against.
    pub meta: BatchMeta,
    n_inits: usize,
    n_cells: usize,
    values: Vec<f64>,
    init_mask: Vec<bool>,
}

impl TargetBatch {
    /// Bind values to dimensions, checking length and mask consistency.
    pub fn new(
        meta: BatchMeta,
        n_inits: usize,
        n_cells: usize,
        values: Vec<f64>,
        init_mask: Vec<bool>,
    ) -> Result<Self> {
        if n_inits == 0 || n_cells == 0 {
            return Err(Error::data("target batch dimensions must be positive"));
        }
        if values.len() != n_inits * n_cells {
            return Err(Error::dims(format!(
                "target batch has {} values for {}x{}",
                values.len(),
                n_inits,
                n_cells
            )));
        }
        if init_mask.len() != n_inits {
            return Err(Error::dims("init mask length != n_inits"));
        }
        Ok(TargetBatch {
            meta,
            n_inits,
            n_cells,
            values,
            init_mask,
        })
    }

    /// Batch with all inits valid.
    pub fn dense(meta: BatchMeta, n_inits: usize, n_cells: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; n_inits];
        Self::new(meta, n_inits, n_cells, values, mask)
    }

    /// Number of initialization times K.
    pub fn n_inits(&self) -> usize {
        self.n_inits
    }

    /// Number of grid cells.
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Per-init validity mask.
    pub fn init_mask(&self) -> &[bool] {
        &self.init_mask
    }

    /// Value at init `k`, cell `i`.
    #[inline]
    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.n_cells + i]
    }

    /// Field at one init.
    pub fn field(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_cells..(k + 1) * self.n_cells]
    }
}

/// Ensemble batch whose values are all 0 or 1.
#[derive(Debug, Clone)]
pub struct BinaryEnsembleBatch(EnsembleBatch);

impl BinaryEnsembleBatch {
    /// Validate that every value is exactly 0 or 1.
    pub fn new(batch: EnsembleBatch) -> Result<Self> {
        if batch.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data("binary ensemble batch has non-0/1 values"));
        }
        Ok(BinaryEnsembleBatch(batch))
    }

    /// The underlying batch.
    pub fn inner(&self) -> &EnsembleBatch {
        &self.0
    }
}

/// Target batch whose values are all 0 or 1.
#[derive(Debug, Clone)]
pub struct BinaryTargetBatch(TargetBatch);

impl BinaryTargetBatch {
    /// Validate that every value is exactly 0 or 1.
    pub fn new(batch: TargetBatch) -> Result<Self> {
        if batch.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data("binary target batch has non-0/1 values"));
        }
        Ok(BinaryTargetBatch(batch))
    }

    /// The underlying batch.
    pub fn inner(&self) -> &TargetBatch {
        &self.0
    }
}

/// Area-normalized contingency table for one probability threshold.
///
/// Entries sum to 1: `tn` (no event, not forecast), `fn_` (event missed),
/// `fp` (false alarm), `tp` (hit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// True negatives.
    pub tn: f64,
    /// False negatives (misses).
    pub fn_: f64,
    /// False positives (false alarms).
    pub fp: f64,
    /// True positives (hits).
    pub tp: f64,
}

impl ConfusionMatrix {
    /// Observed event base rate.
    pub fn base_rate(&self) -> f64 {
        self.tp + self.fn_
    }
}

/// Pairing context shared by every score: the valid inits and the
/// normalization constants.
struct Pairing {
    valid_inits: Vec<usize>,
    n_cells: usize,
}

fn pair(ens: &EnsembleBatch, tgt: &TargetBatch, weights: &AreaWeights) -> Result<Pairing> {
    if ens.n_cells != tgt.n_cells {
        return Err(Error::dims(format!(
            "forecast has {} cells, target {}",
            ens.n_cells, tgt.n_cells
        )));
    }
    if ens.n_inits != tgt.n_inits {
        return Err(Error::dims(format!(
            "forecast has {} inits, target {}",
            ens.n_inits, tgt.n_inits
        )));
    }
    if weights.n_cells() != ens.n_cells {
        return Err(Error::dims(format!(
            "weights cover {} cells, fields {}",
            weights.n_cells(),
            ens.n_cells
        )));
    }
    let valid_inits: Vec<usize> = (0..ens.n_inits)
        .filter(|&k| ens.init_mask[k] && tgt.init_mask[k])
        .collect();
    if valid_inits.is_empty() {
        return Err(Error::data("no init time is valid in both batches"));
    }
    Ok(Pairing {
        valid_inits,
        n_cells: ens.n_cells,
    })
}

/// Area-weighted mean over cells of `f(i)`.
#[inline]
fn weighted_cell_mean(n_cells: usize, weights: &AreaWeights, mut f: impl FnMut(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..n_cells {
        acc += weights.at(i) * f(i);
    }
    acc / n_cells as f64
}

/// Per-init CRPS: area-weighted mean of the ensemble CRPS estimator.
///
/// For each cell, `mean_m |x_m - y| - (1 / (2 M^2)) sum_{m,m'} |x_m - x_m'|`,
/// with the member-pair sum computed in O(M log M) from the sorted ensemble.
pub fn crps_series(
    ens: &EnsembleBatch,
    tgt: &TargetBatch,
    weights: &AreaWeights,
) -> Result<Vec<Option<f64>>> {
    let p = pair(ens, tgt, weights)?;
    let m_count = ens.n_members as f64;
    let mut out = vec![None; ens.n_inits];
    let mut buf = vec![0.0; ens.n_members];
    for &k in &p.valid_inits {
        let v = weighted_cell_mean(p.n_cells, weights, |i| {
            let y = tgt.value(k, i);
            let mut abs_err = 0.0;
            for (m, slot) in buf.iter_mut().enumerate() {
                let x = ens.value(m, k, i);
                abs_err += (x - y).abs();
                *slot = x;
            }
            abs_err /= m_count;
            buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            // sum_{m,m'} |x_m - x_m'| = 2 * sum_r (2r + 1 - M) x_(r).
            let mut gini = 0.0;
            for (r, &x) in buf.iter().enumerate() {
                gini += (2.0 * r as f64 + 1.0 - m_count) * x;
            }
            abs_err - gini / (m_count * m_count)
        });
        out[k] = Some(v);
    }
    Ok(out)
}

fn mean_over_valid(series: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = series.iter().filter_map(|v| *v).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Continuous ranked probability score of the ensemble.
pub fn crps(ens: &EnsembleBatch, tgt: &TargetBatch, weights: &AreaWeights) -> Result<f64> {
    Ok(mean_over_valid(&crps_series(ens, tgt, weights)?))
}

/// Per-init area-weighted mean squared error of the ensemble mean.
pub fn mse_series(
    ens: &EnsembleBatch,
    tgt: &TargetBatch,
    weights: &AreaWeights,
) -> Result<Vec<Option<f64>>> {
    let p = pair(ens, tgt, weights)?;
    let mut out = vec![None; ens.n_inits];
    for &k in &p.valid_inits {
        let v = weighted_cell_mean(p.n_cells, weights, |i| {
            let d = tgt.value(k, i) - ens.mean(k, i);
            d * d
        });
        out[k] = Some(v);
    }
    Ok(out)
}

/// Root-mean-square error of the ensemble mean (the "skill" of the
/// spread-skill ratio).
pub fn ensemble_mean_rmse(
    ens: &EnsembleBatch,
    tgt: &TargetBatch,
    weights: &AreaWeights,
) -> Result<f64> {
    Ok(mean_over_valid(&mse_series(ens, tgt, weights)?).sqrt())
}

/// Per-init area-weighted mean ensemble variance (unbiased, M - 1).
pub fn variance_series(ens: &EnsembleBatch, weights: &AreaWeights) -> Result<Vec<Option<f64>>> {
    if ens.n_members < 2 {
        return Err(Error::data("spread needs at least 2 members"));
    }
    if weights.n_cells() != ens.n_cells {
        return Err(Error::dims("weights do not cover the batch cells"));
    }
    let m_count = ens.n_members as f64;
    let mut out = vec![None; ens.n_inits];
    for k in 0..ens.n_inits {
        if !ens.init_mask[k] {
            continue;
        }
        let v = weighted_cell_mean(ens.n_cells, weights, |i| {
            let mean = ens.mean(k, i);
            let mut ss = 0.0;
            for m in 0..ens.n_members {
                let d = ens.value(m, k, i) - mean;
                ss += d * d;
            }
            ss / (m_count - 1.0)
        });
        out[k] = Some(v);
    }
    Ok(out)
}

/// Ensemble spread: root of the mean per-cell ensemble variance.
pub fn spread(ens: &EnsembleBatch, weights: &AreaWeights) -> Result<f64> {
    Ok(mean_over_valid(&variance_series(ens, weights)?).sqrt())
}

/// Spread-skill ratio with the finite-ensemble correction
/// `sqrt((M + 1) / M) * spread / skill`; 1 indicates a calibrated ensemble.
pub fn spread_skill_ratio(
    ens: &EnsembleBatch,
    tgt: &TargetBatch,
    weights: &AreaWeights,
) -> Result<f64> {
    let skill = ensemble_mean_rmse(ens, tgt, weights)?;
    if skill == 0.0 {
        return Err(Error::Degenerate(
            "spread-skill ratio undefined: zero ensemble-mean RMSE".into(),
        ));
    }
    let m = ens.n_members as f64;
    Ok(((m + 1.0) / m).sqrt() * spread(ens, weights)? / skill)
}

/// Rank histogram of the truth within the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    /// Counts per rank, `n_members + 1` bins; sums to the number of
    /// evaluated (init, cell) points.
    pub counts: Vec<u64>,
}

/// Rank of the verifying value within each ensemble, ties broken uniformly
/// by a deterministic per-(init, cell) substream of `seed`.
pub fn rank_histogram(
    ens: &EnsembleBatch,
    tgt: &TargetBatch,
    weights: &AreaWeights,
    seed: u64,
) -> Result<RankHistogram> {
    let p = pair(ens, tgt, weights)?;
    let mut counts = vec![0u64; ens.n_members + 1];
    for &k in &p.valid_inits {
        for i in 0..p.n_cells {
            let y = tgt.value(k, i);
            let mut less = 0usize;
            let mut ties = 0usize;
            for m in 0..ens.n_members {
                let x = ens.value(m, k, i);
                if x < y {
                    less += 1;
                } else if x == y {
                    ties += 1;
                }
            }
            let rank = if ties == 0 {
                less
            } else {
                let u = unit_uniform(seed, &[k as u64, i as u64]);
                less + ((u * (ties + 1) as f64) as usize).min(ties)
            };
            counts[rank] += 1;
        }
    }
    Ok(RankHistogram { counts })
}

/// Per-init Brier score and base-rate components `(bs_k, rate_k)` of a
/// probabilistic binary forecast (ensemble fraction vs binary truth).
pub fn brier_series(
    ens: &BinaryEnsembleBatch,
    tgt: &BinaryTargetBatch,
    weights: &AreaWeights,
) -> Result<Vec<Option<[f64; 2]>>> {
    let ens = ens.inner();
    let tgt = tgt.inner();
    let p = pair(ens, tgt, weights)?;
    let mut out = vec![None; ens.n_inits];
    for &k in &p.valid_inits {
        let bs = weighted_cell_mean(p.n_cells, weights, |i| {
            let d = ens.mean(k, i) - tgt.value(k, i);
            d * d
        });
        let rate = weighted_cell_mean(p.n_cells, weights, |i| tgt.value(k, i));
        out[k] = Some([bs, rate]);
    }
    Ok(out)
}

/// Brier score of the ensemble-fraction probability forecast.
pub fn brier_score(
    ens: &BinaryEnsembleBatch,
    tgt: &BinaryTargetBatch,
    weights: &AreaWeights,
) -> Result<f64> {
    let series = brier_series(ens, tgt, weights)?;
    let vals: Vec<[f64; 2]> = series.iter().filter_map(|v| *v).collect();
    Ok(vals.iter().map(|v| v[0]).sum::<f64>() / vals.len() as f64)
}

/// Brier skill score against the constant climatological base-rate
/// forecast computed from the same evaluation set.
pub fn brier_skill_score(
    ens: &BinaryEnsembleBatch,
    tgt: &BinaryTargetBatch,
    weights: &AreaWeights,
) -> Result<f64> {
    let series = brier_series(ens, tgt, weights)?;
    let vals: Vec<[f64; 2]> = series.iter().filter_map(|v| *v).collect();
    let bs = vals.iter().map(|v| v[0]).sum::<f64>() / vals.len() as f64;
    let p_clim = vals.iter().map(|v| v[1]).sum::<f64>() / vals.len() as f64;
    // For binary truth the climatological Brier score is p (1 - p).
    let bs_clim = p_clim * (1.0 - p_clim);
    if bs_clim == 0.0 {
        return Err(Error::Degenerate(
            "Brier skill score undefined: constant truth (base rate 0 or 1)".into(),
        ));
    }
    Ok(1.0 - bs / bs_clim)
}

/// Area-weighted contingency tables for every ensemble-count threshold.
///
/// Thresholds are `q_j = (j - 1/2) / M` for `j = 0..=M+1`: a point counts
/// as a positive forecast at threshold `j` iff at least `j` members say 1.
/// `j = 0` is "always act", `j = M + 1` is "never act".
pub fn threshold_confusions(
    ens: &BinaryEnsembleBatch,
    tgt: &BinaryTargetBatch,
    weights: &AreaWeights,
) -> Result<Vec<Vec<ConfusionMatrix>>> {
    let ens_b = ens.inner();
    let tgt_b = tgt.inner();
    let p = pair(ens_b, tgt_b, weights)?;
    let m = ens_b.n_members;
    let mut per_init = vec![Vec::new(); ens_b.n_inits];
    for &k in &p.valid_inits {
        // Weight histogram over the number of positive members.
        let mut w_tot = vec![0.0; m + 1];
        let mut w_pos = vec![0.0; m + 1];
        let mut w_sum = 0.0;
        for i in 0..p.n_cells {
            let mut count = 0usize;
            for mm in 0..m {
                count += (ens_b.value(mm, k, i) == 1.0) as usize;
            }
            let w = weights.at(i);
            w_sum += w;
            w_tot[count] += w;
            if tgt_b.value(k, i) == 1.0 {
                w_pos[count] += w;
            }
        }
        let base: f64 = w_pos.iter().sum::<f64>() / w_sum;
        // Cumulative from the top: positives at threshold j are counts >= j.
        let mut tables = Vec::with_capacity(m + 2);
        let mut tp_w = 0.0;
        let mut pos_w = 0.0;
        // j = M + 1: nothing positive.
        tables.push(ConfusionMatrix {
            tn: 1.0 - base,
            fn_: base,
            fp: 0.0,
            tp: 0.0,
        });
        for j in (0..=m).rev() {
            tp_w += w_pos[j];
            pos_w += w_tot[j];
            let tp = tp_w / w_sum;
            let fp = pos_w / w_sum - tp;
            tables.push(ConfusionMatrix {
                tn: 1.0 - base - fp,
                fn_: base - tp,
                fp,
                tp,
            });
        }
        tables.reverse(); // j = 0 first
        per_init[k] = tables;
    }
    Ok(per_init)
}

/// Relative economic value of a contingency table at a cost/loss ratio.
///
/// May be negative; the optimal-threshold envelope [`rev_curve`] is in
/// [0, 1] by construction.
pub fn rev_from_confusion(cm: &ConfusionMatrix, cost_loss: f64) -> Result<f64> {
    if !(0.0 < cost_loss && cost_loss < 1.0) {
        return Err(Error::config(format!(
            "cost/loss ratio must be in (0, 1), got {cost_loss}"
        )));
    }
    let base = cm.base_rate();
    if base <= 0.0 || base >= 1.0 {
        return Err(Error::Degenerate(format!(
            "relative economic value undefined at base rate {base}"
        )));
    }
    // Loss normalized to 1: taking action costs `cost_loss`, a missed event
    // costs 1.
    let e_forecast = (cm.tp + cm.fp) * cost_loss + cm.fn_;
    let e_clim = (base).min(cost_loss);
    let e_perfect = base * cost_loss;
    Ok((e_clim - e_forecast) / (e_clim - e_perfect))
}

/// Mean contingency tables over valid inits (entry-wise).
fn mean_confusions(per_init: &[Vec<ConfusionMatrix>]) -> Vec<ConfusionMatrix> {
    let valid: Vec<&Vec<ConfusionMatrix>> = per_init.iter().filter(|v| !v.is_empty()).collect();
    let n = valid.len() as f64;
    let m2 = valid[0].len();
    (0..m2)
        .map(|j| {
            let mut cm = ConfusionMatrix {
                tn: 0.0,
                fn_: 0.0,
                fp: 0.0,
                tp: 0.0,
            };
            for v in &valid {
                cm.tn += v[j].tn / n;
                cm.fn_ += v[j].fn_ / n;
                cm.fp += v[j].fp / n;
                cm.tp += v[j].tp / n;
            }
            cm
        })
        .collect()
}

/// Relative economic value optimized over ensemble-count thresholds, for
/// each requested cost/loss ratio. Always in [0, 1]: the always-act and
/// never-act strategies are part of the envelope.
pub fn rev_curve(
    ens: &BinaryEnsembleBatch,
    tgt: &BinaryTargetBatch,
    weights: &AreaWeights,
    cost_loss_ratios: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let per_init = threshold_confusions(ens, tgt, weights)?;
    let tables = mean_confusions(&per_init);
    let base = tables[0].base_rate();
    if base <= 0.0 || base >= 1.0 {
        return Err(Error::Degenerate(format!(
            "relative economic value undefined at base rate {base}"
        )));
    }
    let mut out = Vec::with_capacity(cost_loss_ratios.len());
    for &ratio in cost_loss_ratios {
        let mut best = f64::NEG_INFINITY;
        for cm in &tables {
            best = best.max(rev_from_confusion(cm, ratio)?);
        }
        // The envelope's trivial strategies (always act, never act) have
        // value exactly 0, and perfect expense bounds every strategy's
        // expense, so [0, 1] holds as an identity; strip the roundoff.
        out.push((ratio, best.clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Mean error of the ensemble mean against the target.
pub fn bias(ens: &EnsembleBatch, tgt: &TargetBatch, weights: &AreaWeights) -> Result<f64> {
    let p = pair(ens, tgt, weights)?;
    let mut acc = 0.0;
    for &k in &p.valid_inits {
        acc += weighted_cell_mean(p.n_cells, weights, |i| ens.mean(k, i) - tgt.value(k, i));
    }
    Ok(acc / p.valid_inits.len() as f64)
}

fn wind_speed_name(u_variable: &str) -> String {
    match u_variable {
        "10u" => "10si".to_string(),
        "u" => "ws".to_string(),
        other => format!("{other}_speed"),
    }
}

/// Per-member wind speed `sqrt(u^2 + v^2)` from component batches.
pub fn derive_wind_speed(u: &EnsembleBatch, v: &EnsembleBatch) -> Result<EnsembleBatch> {
    if u.n_members != v.n_members || u.n_inits != v.n_inits || u.n_cells != v.n_cells {
        return Err(Error::dims("wind component batches have different shapes"));
    }
    if u.init_mask != v.init_mask {
        return Err(Error::data("wind component batches have different masks"));
    }
    let values = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    EnsembleBatch::new(
        BatchMeta {
            variable: wind_speed_name(&u.meta.variable),
            level_hpa: u.meta.level_hpa,
            lead_time_h: u.meta.lead_time_h,
        },
        u.n_members,
        u.n_inits,
        u.n_cells,
        values,
        u.init_mask.clone(),
    )
}

/// Per-sample wind speed for target batches.
pub fn derive_wind_speed_target(u: &TargetBatch, v: &TargetBatch) -> Result<TargetBatch> {
    if u.n_inits != v.n_inits || u.n_cells != v.n_cells {
        return Err(Error::dims("wind component batches have different shapes"));
    }
    if u.init_mask != v.init_mask {
        return Err(Error::data("wind component batches have different masks"));
    }
    let values = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    TargetBatch::new(
        BatchMeta {
            variable: wind_speed_name(&u.meta.variable),
            level_hpa: u.meta.level_hpa,
            lead_time_h: u.meta.lead_time_h,
        },
        u.n_inits,
        u.n_cells,
        values,
        u.init_mask.clone(),
    )
}

/// Per-cell climatological thresholds at fixed percentiles.
#[derive(Debug, Clone)]
pub struct ClimatologyPercentiles {
    /// Percentiles in [0, 100], as requested.
    pub percentiles: Vec<f64>,
    n_cells: usize,
    /// Thresholds, percentile-major: `[p][cell]`.
    thresholds: Vec<f64>,
}

impl ClimatologyPercentiles {
    /// Number of cells covered.
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Threshold field for one percentile index.
    pub fn threshold_field(&self, p_idx: usize) -> &[f64] {
        &self.thresholds[p_idx * self.n_cells..(p_idx + 1) * self.n_cells]
    }
}

/// Per-cell percentiles of a historical series, by linear interpolation of
/// order statistics.
pub fn climatology_percentiles(
    history: &TargetBatch,
    percentiles: &[f64],
) -> Result<ClimatologyPercentiles> {
    if percentiles.is_empty() {
        return Err(Error::config("no percentiles requested"));
    }
    for &p in percentiles {
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::config(format!("percentile {p} outside [0, 100]")));
        }
    }
    let valid: Vec<usize> = (0..history.n_inits)
        .filter(|&k| history.init_mask[k])
        .collect();
    if valid.is_empty() {
        return Err(Error::data("climatology history has no valid samples"));
    }
    let mut thresholds = vec![0.0; percentiles.len() * history.n_cells];
    let mut buf = Vec::with_capacity(valid.len());
    for i in 0..history.n_cells {
        buf.clear();
        buf.extend(valid.iter().map(|&k| history.value(k, i)));
        buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        for (pi, &p) in percentiles.iter().enumerate() {
            thresholds[pi * history.n_cells + i] = percentile_sorted(&buf, p);
        }
    }
    Ok(ClimatologyPercentiles {
        percentiles: percentiles.to_vec(),
        n_cells: history.n_cells,
        thresholds,
    })
}

/// Which side of the threshold counts as the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExceedDirection {
    /// Event iff value strictly above threshold.
    Above,
    /// Event iff value strictly below threshold.
    Below,
}

/// Binarize an ensemble batch against per-cell thresholds
/// (strict inequality).
pub fn exceedance_binarize(
    ens: &EnsembleBatch,
    thresholds: &[f64],
    direction: ExceedDirection,
) -> Result<BinaryEnsembleBatch> {
    if thresholds.len() != ens.n_cells {
        return Err(Error::dims("threshold field does not match batch cells"));
    }
    let mut out = ens.clone();
    for m in 0..ens.n_members {
        for k in 0..ens.n_inits {
            let f = out.member_field_mut(m, k);
            for (i, v) in f.iter_mut().enumerate() {
                *v = match direction {
                    ExceedDirection::Above => (*v > thresholds[i]) as u8 as f64,
                    ExceedDirection::Below => (*v < thresholds[i]) as u8 as f64,
                };
            }
        }
    }
    BinaryEnsembleBatch::new(out)
}

/// Binarize a target batch against per-cell thresholds (strict inequality).
pub fn exceedance_binarize_target(
    tgt: &TargetBatch,
    thresholds: &[f64],
    direction: ExceedDirection,
) -> Result<BinaryTargetBatch> {
    if thresholds.len() != tgt.n_cells {
        return Err(Error::dims("threshold field does not match batch cells"));
    }
    let mut out = tgt.clone();
    for k in 0..tgt.n_inits {
        let start = k * tgt.n_cells;
        for i in 0..tgt.n_cells {
            let v = &mut out.values[start + i];
            *v = match direction {
                ExceedDirection::Above => (*v > thresholds[i]) as u8 as f64,
                ExceedDirection::Below => (*v < thresholds[i]) as u8 as f64,
            };
        }
    }
    BinaryTargetBatch::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn meta() -> BatchMeta {
        BatchMeta {
            variable: "t".into(),
            level_hpa: Some(850),
            lead_time_h: 24,
        }
    }

    fn uniform_weights(n: usize) -> AreaWeights {
        AreaWeights::uniform(1, n)
    }

    /// Exact CRPS by integrating the squared difference between the
    /// ensemble step CDF and the observation step function.
    fn crps_integral_oracle(members: &[f64], y: f64) -> f64 {
        let mut pts: Vec<f64> = members.to_vec();
        pts.push(y);
        pts.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let m = members.len() as f64;
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (a + b);
            let cdf = members.iter().filter(|&&x| x <= mid).count() as f64 / m;
            let step = if mid >= y { 1.0 } else { 0.0 };
            total += (cdf - step).powi(2) * (b - a);
        }
        total
    }

    #[test]
    fn crps_two_member_worked_example() {
        let ens = EnsembleBatch::dense(meta(), 2, 1, 1, vec![0.0, 2.0]).unwrap();
        let tgt = TargetBatch::dense(meta(), 1, 1, vec![1.0]).unwrap();
        let got = crps(&ens, &tgt, &uniform_weights(1)).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
    }

    #[test]
    fn crps_matches_integral_oracle_on_random_ensembles() {
        let mut rng = crate::rng::substream(11, &[0]);
        for trial in 0..100 {
            let m = 2 + (trial % 15);
            let members: Vec<f64> = (0..m)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    3.0 * v
                })
                .collect();
            let y: f64 = StandardNormal.sample(&mut rng);
            let ens = EnsembleBatch::dense(meta(), m, 1, 1, members.clone()).unwrap();
            let tgt = TargetBatch::dense(meta(), 1, 1, vec![y]).unwrap();
            let got = crps(&ens, &tgt, &uniform_weights(1)).unwrap();
            let want = crps_integral_oracle(&members, y);
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn perfect_deterministic_ensemble_has_zero_crps() {
        let ens = EnsembleBatch::dense(meta(), 3, 1, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let tgt = TargetBatch::dense(meta(), 1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(crps(&ens, &tgt, &uniform_weights(2)).unwrap(), 0.0);
    }

    #[test]
    fn masked_inits_are_excluded() {
        // Second init carries garbage but is masked out.
        let ens = EnsembleBatch::new(
            meta(),
            2,
            2,
            1,
            vec![0.0, 9e9, 2.0, -9e9],
            vec![true, false],
        )
        .unwrap();
        let tgt =
            TargetBatch::new(meta(), 2, 1, vec![1.0, 5e8], vec![true, true]).unwrap();
        let got = crps(&ens, &tgt, &uniform_weights(1)).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spread_skill_is_calibrated_for_exchangeable_gaussians() {
        let m = 10usize;
        let n_cells = 20_000usize;
        let mut rng = crate::rng::substream(5, &[1]);
        let mut vals = Vec::with_capacity(m * n_cells);
        for _ in 0..m * n_cells {
            vals.push(StandardNormal.sample(&mut rng));
        }
        let ens = EnsembleBatch::dense(meta(), m, 1, n_cells, vals).unwrap();
        let tgt = TargetBatch::dense(
            meta(),
            1,
            n_cells,
            (0..n_cells).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap();
        let ssr = spread_skill_ratio(&ens, &tgt, &uniform_weights(n_cells)).unwrap();
        assert!((ssr - 1.0).abs() < 0.02, "ratio {ssr}");
    }

    #[test]
    fn rank_histogram_is_deterministic_and_complete() {
        let m = 4usize;
        let n_cells = 500usize;
        let mut rng = crate::rng::substream(9, &[2]);
        let vals: Vec<f64> = (0..m * n_cells).map(|_| rng.random::<f64>()).collect();
        let ens = EnsembleBatch::dense(meta(), m, 1, n_cells, vals).unwrap();
        let tgt = TargetBatch::dense(
            meta(),
            1,
            n_cells,
            (0..n_cells).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let w = uniform_weights(n_cells);
        let h1 = rank_histogram(&ens, &tgt, &w, 33).unwrap();
        let h2 = rank_histogram(&ens, &tgt, &w, 33).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.counts.len(), m + 1);
        assert_eq!(h1.counts.iter().sum::<u64>(), n_cells as u64);
    }

    #[test]
    fn rank_histogram_breaks_ties_uniformly() {
        // All members identical to the truth: rank must spread evenly.
        let m = 3usize;
        let n_cells = 40_000usize;
        let ens = EnsembleBatch::dense(meta(), m, 1, n_cells, vec![1.0; m * n_cells]).unwrap();
        let tgt = TargetBatch::dense(meta(), 1, n_cells, vec![1.0; n_cells]).unwrap();
        let h = rank_histogram(&ens, &tgt, &uniform_weights(n_cells), 7).unwrap();
        let expect = n_cells as f64 / (m + 1) as f64;
        for (r, &c) in h.counts.iter().enumerate() {
            let dev = (c as f64 - expect).abs() / expect;
            assert!(dev < 0.05, "rank {r}: count {c} vs {expect}");
        }
    }

    #[test]
    fn brier_zero_for_perfect_and_zero_skill_for_climatology() {
        let truth = vec![1.0, 0.0, 0.0, 1.0];
        let tgt = BinaryTargetBatch::new(TargetBatch::dense(meta(), 1, 4, truth.clone()).unwrap())
            .unwrap();
        let w = uniform_weights(4);
        // Perfect: every member equals the truth.
        let perfect = BinaryEnsembleBatch::new(
            EnsembleBatch::dense(meta(), 2, 1, 4, [truth.clone(), truth.clone()].concat())
                .unwrap(),
        )
        .unwrap();
        assert_eq!(brier_score(&perfect, &tgt, &w).unwrap(), 0.0);
        // Constant forecast at the base rate 0.5: BSS = 0.
        let half = BinaryEnsembleBatch::new(
            EnsembleBatch::dense(
                meta(),
                2,
                1,
                4,
                vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap(),
        )
        .unwrap();
        let bss = brier_skill_score(&half, &tgt, &w).unwrap();
        assert!(bss.abs() < 1e-15, "BSS {bss}");
    }

    #[test]
    fn rev_hand_computed_confusion_table() {
        let cm = ConfusionMatrix {
            tn: 0.7,
            fn_: 0.1,
            fp: 0.1,
            tp: 0.1,
        };
        // cost 0.05, loss 1: E_f = 0.2 * 0.05 + 0.1 = 0.11,
        // E_clim = min(0.2, 0.05) = 0.05, E_perfect = 0.01,
        // REV = (0.05 - 0.11) / (0.05 - 0.01) = -1.5.
        let rev = rev_from_confusion(&cm, 0.05).unwrap();
        assert!((rev + 1.5).abs() < 1e-12, "rev {rev}");
    }

    #[test]
    fn rev_curve_is_one_for_perfect_and_bounded_for_random() {
        let mut rng = crate::rng::substream(17, &[4]);
        let n_cells = 4000usize;
        let truth: Vec<f64> = (0..n_cells)
            .map(|_| (rng.random::<f64>() < 0.2) as u8 as f64)
            .collect();
        let tgt =
            BinaryTargetBatch::new(TargetBatch::dense(meta(), 1, n_cells, truth.clone()).unwrap())
                .unwrap();
        let w = uniform_weights(n_cells);
        let m = 4usize;
        let perfect = BinaryEnsembleBatch::new(
            EnsembleBatch::dense(meta(), m, 1, n_cells, truth.repeat(m)).unwrap(),
        )
        .unwrap();
        let ratios = [0.02, 0.1, 0.35, 0.72];
        for (ratio, rev) in rev_curve(&perfect, &tgt, &w, &ratios).unwrap() {
            assert!((rev - 1.0).abs() < 1e-12, "ratio {ratio}: rev {rev}");
        }
        // Random members: still inside [0, 1] thanks to the trivial
        // strategies.
        let rand_vals: Vec<f64> = (0..m * n_cells)
            .map(|_| (rng.random::<f64>() < 0.2) as u8 as f64)
            .collect();
        let random = BinaryEnsembleBatch::new(
            EnsembleBatch::dense(meta(), m, 1, n_cells, rand_vals).unwrap(),
        )
        .unwrap();
        for (ratio, rev) in rev_curve(&random, &tgt, &w, &ratios).unwrap() {
            assert!((0.0..=1.0).contains(&rev), "ratio {ratio}: rev {rev}");
        }
        // Degenerate truth errors out.
        let zeros = BinaryTargetBatch::new(
            TargetBatch::dense(meta(), 1, n_cells, vec![0.0; n_cells]).unwrap(),
        )
        .unwrap();
        assert!(rev_curve(&perfect, &zeros, &w, &ratios).is_err());
    }

    #[test]
    fn bias_and_wind_speed() {
        let u = EnsembleBatch::dense(meta(), 1, 1, 2, vec![3.0, 0.0]).unwrap();
        let v = EnsembleBatch::dense(meta(), 1, 1, 2, vec![4.0, 1.0]).unwrap();
        let ws = derive_wind_speed(&u, &v).unwrap();
        assert_eq!(ws.value(0, 0, 0), 5.0);
        assert_eq!(ws.value(0, 0, 1), 1.0);
        let tgt = TargetBatch::dense(meta(), 1, 2, vec![4.0, 2.0]).unwrap();
        let b = bias(&ws, &tgt, &uniform_weights(2)).unwrap();
        assert!((b - 0.0).abs() < 1e-15);
    }

    #[test]
    fn climatology_percentile_machinery() {
        let n_inits = 100;
        let vals: Vec<f64> = (1..=n_inits).map(|v| v as f64).collect();
        let hist = TargetBatch::dense(meta(), n_inits, 1, vals).unwrap();
        let clim = climatology_percentiles(&hist, &[50.0, 99.0]).unwrap();
        assert!((clim.threshold_field(0)[0] - 50.5).abs() < 1e-12);
        assert!((clim.threshold_field(1)[0] - 99.01).abs() < 1e-12);
        // Monotone in percentile per cell.
        assert!(clim.threshold_field(0)[0] <= clim.threshold_field(1)[0]);
    }

    #[test]
    fn binarize_uses_strict_inequality() {
        let ens = EnsembleBatch::dense(meta(), 1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let thr = vec![2.0, 2.0, 2.0];
        let above = exceedance_binarize(&ens, &thr, ExceedDirection::Above).unwrap();
        assert_eq!(above.inner().member_field(0, 0), &[0.0, 0.0, 1.0]);
        let below = exceedance_binarize(&ens, &thr, ExceedDirection::Below).unwrap();
        assert_eq!(below.inner().member_field(0, 0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let ens = EnsembleBatch::dense(meta(), 2, 1, 3, vec![0.0; 6]).unwrap();
        let tgt = TargetBatch::dense(meta(), 1, 4, vec![0.0; 4]).unwrap();
        assert!(crps(&ens, &tgt, &uniform_weights(3)).is_err());
        let tgt3 = TargetBatch::dense(meta(), 1, 3, vec![0.0; 3]).unwrap();
        assert!(crps(&ens, &tgt3, &uniform_weights(7)).is_err());
        assert!(BinaryEnsembleBatch::new(
            EnsembleBatch::dense(meta(), 1, 1, 2, vec![0.0, 0.5]).unwrap()
        )
        .is_err());
    }
}
