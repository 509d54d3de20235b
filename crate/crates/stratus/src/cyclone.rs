//! Tropical-cyclone detection, temporal stitching into tracks, ensemble
//! strike-probability heatmaps, and cyclone economic-value evaluation.
//!
//! Detection requires these channels in the input state: mean sea level
//! pressure `msl` (Pa), geopotential `z` at 300 and 500 hPa (m²/s²), the
//! 10 m wind components `10u`/`10v` (m/s), and surface geopotential `zs`.

use crate::error::{Error, Result};
use crate::fields::FieldSet;
use crate::grid::{central_angle, unit_vector, LatLonGrid};
use crate::metrics::{
    rev_curve, BatchMeta, BinaryEnsembleBatch, BinaryTargetBatch, EnsembleBatch, TargetBatch,
};
use crate::STANDARD_GRAVITY;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// A cyclone candidate at one time slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycloneCandidate {
    /// Validity time in hours.
    pub time_h: i64,
    pub lat: f64,
    pub lon: f64,
    /// Sea-level pressure at the minimum, Pa.
    pub msl_pa: f64,
    /// Maximum 10 m wind speed near the centre, m/s.
    pub wind_speed_ms: f64,
    /// Surface elevation at the centre, m.
    pub surface_elevation_m: f64,
}

/// Candidates detected at one validity time (possibly none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSlice {
    pub time_h: i64,
    pub candidates: Vec<CycloneCandidate>,
}

impl TimeSlice {
    pub fn new(time_h: i64, candidates: Vec<CycloneCandidate>) -> Result<Self> {
        if candidates.iter().any(|c| c.time_h != time_h) {
            return Err(Error::data("candidate time differs from its slice time"));
        }
        Ok(TimeSlice {
            time_h,
            candidates,
        })
    }
}

/// A stitched cyclone trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycloneTrack {
    /// Time-ordered candidates.
    pub candidates: Vec<CycloneCandidate>,
}

impl CycloneTrack {
    /// Re-check the stitching constraints on a finished track.
    pub fn validate(&self, cfg: &StitchConfig) -> Result<()> {
        for pair in self.candidates.windows(2) {
            if pair[1].time_h <= pair[0].time_h {
                return Err(Error::data("track times not strictly increasing"));
            }
            if pair[1].time_h - pair[0].time_h > cfg.max_gap_h {
                return Err(Error::data("track gap exceeds the allowed maximum"));
            }
            let d = great_circle_deg(pair[0].lat, pair[0].lon, pair[1].lat, pair[1].lon);
            if d > cfg.range_deg + 1e-9 {
                return Err(Error::data("track jump exceeds the stitch range"));
            }
        }
        Ok(())
    }

    pub fn start_time_h(&self) -> i64 {
        self.candidates.first().map(|c| c.time_h).unwrap_or(0)
    }

    pub fn end_time_h(&self) -> i64 {
        self.candidates.last().map(|c| c.time_h).unwrap_or(0)
    }
}

/// Candidate-detection thresholds. The sea-level-pressure closed-contour
/// depth is exposed as a parameter (default 200 Pa, the cited tracker's
/// default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Closed-contour depth above the pressure minimum, Pa.
    pub contour_depth_pa: f64,
    /// The pressure contour must close within this great-circle radius (deg).
    pub msl_compactness_deg: f64,
    /// Weaker minima within this distance of a stronger one are removed (deg).
    pub merge_deg: f64,
    /// Required decrease of upper-level thickness below its maximum, m²/s².
    pub warm_core_drop: f64,
    /// The thickness contour must close within this radius of the maximum (deg).
    pub warm_core_compactness_deg: f64,
    /// Search radius around the pressure minimum for the thickness maximum (deg).
    pub warm_core_search_deg: f64,
    /// Radius of the wind-speed maximum search (deg).
    pub wind_radius_deg: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            contour_depth_pa: 200.0,
            msl_compactness_deg: 5.5,
            merge_deg: 6.0,
            warm_core_drop: 58.8,
            warm_core_compactness_deg: 6.5,
            warm_core_search_deg: 1.0,
            wind_radius_deg: 2.0,
        }
    }
}

/// Track-stitching thresholds at 12-hourly cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    /// Maximum great-circle movement between linked candidates (deg).
    pub range_deg: f64,
    /// Maximum time gap inside a track, hours.
    pub max_gap_h: i64,
    /// Minimum track duration, hours.
    pub min_duration_h: i64,
    /// Minimum number of slices meeting the intensity/location thresholds.
    pub min_qualifying_slices: usize,
    /// Wind-speed threshold (strictly greater), m/s.
    pub wind_threshold_ms: f64,
    /// Elevation threshold (strictly below), m.
    pub max_elevation_m: f64,
    /// Absolute-latitude threshold (inclusive), degrees.
    pub max_abs_lat_deg: f64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            range_deg: 12.0,
            max_gap_h: 24,
            min_duration_h: 54,
            min_qualifying_slices: 5,
            wind_threshold_ms: 10.0,
            max_elevation_m: 150.0,
            max_abs_lat_deg: 50.0,
        }
    }
}

/// Great-circle separation in degrees of arc.
pub fn great_circle_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    central_angle(unit_vector(lat1, lon1), unit_vector(lat2, lon2)).to_degrees()
}

fn neighbors8(grid: &LatLonGrid, row: usize, col: usize, out: &mut Vec<usize>) {
    out.clear();
    let n_lon = grid.n_lon();
    let left = (col + n_lon - 1) % n_lon;
    let right = (col + 1) % n_lon;
    for dr in -1i64..=1 {
        let r = row as i64 + dr;
        if r < 0 || r >= grid.n_lat() as i64 {
            continue;
        }
        let r = r as usize;
        for &c in &[left, col, right] {
            if r == row && c == col {
                continue;
            }
            out.push(grid.cell_index(r, c));
        }
    }
}

/// Region-grow from `start` over cells where `deeper_than(value)` holds;
/// returns false if any such cell lies farther than `radius_deg` from the
/// start (the contour fails to close within the compactness radius).
fn contour_closes(
    grid: &LatLonGrid,
    values: &[f64],
    start: usize,
    threshold: f64,
    below: bool,
    radius_deg: f64,
) -> bool {
    let inside = |v: f64| if below { v < threshold } else { v > threshold };
    let (lat0, lon0) = grid.cell_center(start);
    let mut seen = vec![false; grid.n_cells()];
    let mut queue = VecDeque::new();
    let mut nbrs = Vec::with_capacity(8);
    seen[start] = true;
    queue.push_back(start);
    while let Some(cell) = queue.pop_front() {
        let (lat, lon) = grid.cell_center(cell);
        if great_circle_deg(lat0, lon0, lat, lon) > radius_deg {
            return false;
        }
        let (r, c) = grid.row_col(cell);
        neighbors8(grid, r, c, &mut nbrs);
        for &n in &nbrs {
            if !seen[n] && inside(values[n]) {
                seen[n] = true;
                queue.push_back(n);
            }
        }
    }
    true
}

/// Cells within a great-circle radius of a point, via a conservative
/// latitude-row window and an exact distance check.
fn cells_within(grid: &LatLonGrid, lat0: f64, lon0: f64, radius_deg: f64) -> Vec<usize> {
    let lats = grid.latitudes();
    let mut out = Vec::new();
    for (r, &lat) in lats.iter().enumerate() {
        if (lat - lat0).abs() > radius_deg + 1e-9 {
            continue;
        }
        for c in 0..grid.n_lon() {
            let cell = grid.cell_index(r, c);
            let (clat, clon) = grid.cell_center(cell);
            if great_circle_deg(lat0, lon0, clat, clon) <= radius_deg {
                out.push(cell);
            }
        }
    }
    out
}

/// Detect cyclone candidates in one multi-channel state: sea-level
/// pressure minima that are compact closed lows co-located with compact
/// upper-level warm cores (maxima of the 300-minus-500 hPa geopotential
/// thickness), with weaker minima near a stronger one removed.
pub fn detect_nodes(
    state: &FieldSet,
    time_h: i64,
    cfg: &DetectConfig,
) -> Result<Vec<CycloneCandidate>> {
    let msl = state.channel(state.require("msl", None)?);
    let z300 = state.channel(state.require("z", Some(300))?);
    let z500 = state.channel(state.require("z", Some(500))?);
    let u10 = state.channel(state.require("10u", None)?);
    let v10 = state.channel(state.require("10v", None)?);
    let zs = state.channel(state.require("zs", None)?);
    let grid = &state.grid;
    if let Some((ch, cell)) = state.first_non_finite() {
        return Err(Error::data(format!(
            "non-finite input value (channel {ch}, cell {cell})"
        )));
    }

    // Strict local minima of sea-level pressure, 8-connected with
    // longitude wrap-around.
    let mut minima: Vec<usize> = Vec::new();
    let mut nbrs = Vec::with_capacity(8);
    for r in 0..grid.n_lat() {
        for c in 0..grid.n_lon() {
            let cell = grid.cell_index(r, c);
            neighbors8(grid, r, c, &mut nbrs);
            if nbrs.iter().all(|&n| msl[cell] < msl[n]) {
                minima.push(cell);
            }
        }
    }

    // Remove minima within merge range of a stronger (deeper) one.
    minima.sort_by(|&a, &b| {
        msl[a]
            .partial_cmp(&msl[b])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'outer: for &cell in &minima {
        let (lat, lon) = grid.cell_center(cell);
        for &k in &kept {
            let (klat, klon) = grid.cell_center(k);
            if great_circle_deg(lat, lon, klat, klon) <= cfg.merge_deg {
                continue 'outer;
            }
        }
        kept.push(cell);
    }

    // Thickness of the upper layer; its maxima mark warm cores.
    let thickness: Vec<f64> = z300.iter().zip(z500).map(|(&a, &b)| a - b).collect();

    let mut out = Vec::new();
    for &cell in &kept {
        let (lat, lon) = grid.cell_center(cell);
        // Compact closed pressure contour around the minimum.
        if !contour_closes(
            grid,
            msl,
            cell,
            msl[cell] + cfg.contour_depth_pa,
            true,
            cfg.msl_compactness_deg,
        ) {
            continue;
        }
        // Warm core: locate the thickness maximum near the minimum, then
        // require a compact closed decrease contour around it.
        let near = cells_within(grid, lat, lon, cfg.warm_core_search_deg);
        let core = near
            .into_iter()
            .max_by(|&a, &b| thickness[a].partial_cmp(&thickness[b]).unwrap())
            .unwrap_or(cell);
        if !contour_closes(
            grid,
            &thickness,
            core,
            thickness[core] - cfg.warm_core_drop,
            false,
            cfg.warm_core_compactness_deg,
        ) {
            continue;
        }
        let wind = cells_within(grid, lat, lon, cfg.wind_radius_deg)
            .into_iter()
            .map(|i| (u10[i] * u10[i] + v10[i] * v10[i]).sqrt())
            .fold(0.0f64, f64::max);
        out.push(CycloneCandidate {
            time_h,
            lat,
            lon,
            msl_pa: msl[cell],
            wind_speed_ms: wind,
            surface_elevation_m: zs[cell] / STANDARD_GRAVITY,
        });
    }
    // Deterministic output order: deeper minima first, then position.
    out.sort_by(|a, b| {
        a.msl_pa
            .partial_cmp(&b.msl_pa)
            .unwrap()
            .then_with(|| a.lat.partial_cmp(&b.lat).unwrap())
            .then_with(|| a.lon.partial_cmp(&b.lon).unwrap())
    });
    Ok(out)
}

/// Stitch per-time candidate sets into tracks: greedy nearest-candidate
/// linking within the stitch range (ties broken by deeper pressure), a
/// maximum 24 h gap, then duration and intensity/location filters.
pub fn stitch_nodes(slices: &[TimeSlice], cfg: &StitchConfig) -> Result<Vec<CycloneTrack>> {
    for pair in slices.windows(2) {
        if pair[1].time_h <= pair[0].time_h {
            return Err(Error::data("time slices not strictly increasing"));
        }
    }
    struct Open {
        candidates: Vec<CycloneCandidate>,
    }
    let mut open: Vec<Open> = Vec::new();
    let mut finished: Vec<CycloneTrack> = Vec::new();
    for slice in slices {
        // Retire tracks whose gap would exceed the maximum.
        let mut still_open = Vec::new();
        for t in open.drain(..) {
            if slice.time_h - t.candidates.last().unwrap().time_h > cfg.max_gap_h {
                finished.push(CycloneTrack {
                    candidates: t.candidates,
                });
            } else {
                still_open.push(t);
            }
        }
        open = still_open;

        // Candidate order inside a slice: deeper first, then position.
        let mut cand_idx: Vec<usize> = (0..slice.candidates.len()).collect();
        cand_idx.sort_by(|&a, &b| {
            let (ca, cb) = (&slice.candidates[a], &slice.candidates[b]);
            ca.msl_pa
                .partial_cmp(&cb.msl_pa)
                .unwrap()
                .then_with(|| ca.lat.partial_cmp(&cb.lat).unwrap())
                .then_with(|| ca.lon.partial_cmp(&cb.lon).unwrap())
        });

        // All in-range (track, candidate) pairs, nearest first; ties by
        // deeper candidate pressure, then by stable indices.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in open.iter().enumerate() {
            let last = t.candidates.last().unwrap();
            for (rank, &ci) in cand_idx.iter().enumerate() {
                let c = &slice.candidates[ci];
                let d = great_circle_deg(last.lat, last.lon, c.lat, c.lon);
                if d <= cfg.range_deg {
                    pairs.push((d, rank, ti));
                }
            }
        }
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        let mut track_taken = vec![false; open.len()];
        let mut cand_taken = vec![false; slice.candidates.len()];
        for (_, rank, ti) in pairs {
            let ci = cand_idx[rank];
            if track_taken[ti] || cand_taken[ci] {
                continue;
            }
            track_taken[ti] = true;
            cand_taken[ci] = true;
            open[ti].candidates.push(slice.candidates[ci].clone());
        }
        // Unlinked candidates start new tracks, in deterministic order.
        for &ci in &cand_idx {
            if !cand_taken[ci] {
                open.push(Open {
                    candidates: vec![slice.candidates[ci].clone()],
                });
            }
        }
    }
    finished.extend(open.into_iter().map(|t| CycloneTrack {
        candidates: t.candidates,
    }));

    // Duration and threshold filters.
    let mut out: Vec<CycloneTrack> = finished
        .into_iter()
        .filter(|t| {
            let dur = t.end_time_h() - t.start_time_h();
            if dur < cfg.min_duration_h {
                return false;
            }
            let qualifying = t
                .candidates
                .iter()
                .filter(|c| {
                    c.wind_speed_ms > cfg.wind_threshold_ms
                        && c.surface_elevation_m < cfg.max_elevation_m
                        && c.lat.abs() <= cfg.max_abs_lat_deg
                })
                .count();
            qualifying >= cfg.min_qualifying_slices
        })
        .collect();
    out.sort_by(|a, b| {
        a.start_time_h().cmp(&b.start_time_h()).then_with(|| {
            a.candidates[0]
                .msl_pa
                .partial_cmp(&b.candidates[0].msl_pa)
                .unwrap()
        })
    });
    for t in &out {
        t.validate(cfg)?;
    }
    Ok(out)
}

/// Ensemble strike probabilities at one validity time on a lat-lon grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrikeHeatmap {
    pub grid: LatLonGrid,
    pub time_h: i64,
    pub n_members: usize,
    /// Fraction of members with a cyclone centre in each cell.
    pub probabilities: Vec<f64>,
}

/// The 1° global evaluation grid.
pub fn one_degree_grid() -> LatLonGrid {
    LatLonGrid::cell_centered(180, 360).expect("static grid")
}

fn nearest_cell(grid: &LatLonGrid, lat: f64, lon: f64) -> usize {
    let lats = grid.latitudes();
    let spacing_lat = if lats.len() > 1 {
        lats[0] - lats[1]
    } else {
        1.0
    };
    let row = ((lats[0] - lat) / spacing_lat).round();
    let row = (row.max(0.0) as usize).min(grid.n_lat() - 1);
    let lon0 = grid.longitudes()[0];
    let col = ((lon - lon0).rem_euclid(360.0) / grid.lon_spacing()).round() as usize % grid.n_lon();
    grid.cell_index(row, col)
}

/// Strike probabilities at `time_h`: the fraction of members whose tracks
/// place a cyclone centre in each cell (a member counts at most once per
/// cell).
pub fn strike_heatmap(
    member_tracks: &[Vec<CycloneTrack>],
    grid: &LatLonGrid,
    time_h: i64,
) -> Result<StrikeHeatmap> {
    let m = member_tracks.len();
    if m == 0 {
        return Err(Error::config("strike heatmap needs at least one member"));
    }
    let mut counts = vec![0u32; grid.n_cells()];
    for tracks in member_tracks {
        let mut hit = vec![false; grid.n_cells()];
        for track in tracks {
            for c in &track.candidates {
                if c.time_h == time_h {
                    hit[nearest_cell(grid, c.lat, c.lon)] = true;
                }
            }
        }
        for (cnt, h) in counts.iter_mut().zip(&hit) {
            if *h {
                *cnt += 1;
            }
        }
    }
    Ok(StrikeHeatmap {
        grid: grid.clone(),
        time_h,
        n_members: m,
        probabilities: counts.iter().map(|&c| c as f64 / m as f64).collect(),
    })
}

/// Economic value of cyclone-presence forecasts: reconstructs the member
/// count behind each probability (they are exact member fractions) and
/// evaluates the threshold-optimal value curve over all validity times
/// with cell area weights.
pub fn cyclone_rev(
    heatmaps: &[StrikeHeatmap],
    truth_maps: &[StrikeHeatmap],
    cost_loss_ratios: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if heatmaps.is_empty() || heatmaps.len() != truth_maps.len() {
        return Err(Error::dims(
            "need equally many forecast and truth heatmaps",
        ));
    }
    let m = heatmaps[0].n_members;
    let grid = &heatmaps[0].grid;
    let g = grid.n_cells();
    let k = heatmaps.len();
    let mut ens_values = vec![0.0; m * k * g];
    let mut tgt_values = vec![0.0; k * g];
    for (ki, (h, t)) in heatmaps.iter().zip(truth_maps).enumerate() {
        if h.grid != *grid || t.grid != *grid {
            return Err(Error::dims("heatmap grids differ"));
        }
        if h.time_h != t.time_h {
            return Err(Error::data(format!(
                "forecast time {} does not match truth time {}",
                h.time_h, t.time_h
            )));
        }
        if h.n_members != m {
            return Err(Error::dims("heatmaps disagree on member count"));
        }
        for (i, &p) in h.probabilities.iter().enumerate() {
            let count = p * m as f64;
            let rounded = count.round();
            if (count - rounded).abs() > 1e-9 || !(0.0..=m as f64).contains(&rounded) {
                return Err(Error::data(format!(
                    "probability {p} is not an exact fraction of {m} members"
                )));
            }
            // Exchangeable reconstruction: the first `count` members
            // forecast presence. Threshold analysis only depends on the
            // per-cell member count, so this is exact.
            for mi in 0..rounded as usize {
                ens_values[(mi * k + ki) * g + i] = 1.0;
            }
        }
        for (i, &p) in t.probabilities.iter().enumerate() {
            if p != 0.0 && p != 1.0 {
                return Err(Error::data("truth heatmap values must be 0 or 1"));
            }
            tgt_values[ki * g + i] = p;
        }
    }
    let meta = BatchMeta {
        variable: "cyclone_presence".to_string(),
        level_hpa: None,
        lead_time_h: 0,
    };
    let ens = BinaryEnsembleBatch::new(EnsembleBatch::dense(meta.clone(), m, k, g, ens_values)?)?;
    let tgt = BinaryTargetBatch::new(TargetBatch::dense(meta, k, g, tgt_values)?)?;
    let weights = grid.area_weights();
    rev_curve(&ens, &tgt, &weights, cost_loss_ratios)
}

/// Concatenate ground-truth context slices ahead of forecast slices so
/// the tracker can see storms that began before initialization. The
/// cadence must be uniform and continuous across the splice.
pub fn prepend_context(context: &[TimeSlice], forecast: &[TimeSlice]) -> Result<Vec<TimeSlice>> {
    if forecast.is_empty() {
        return Err(Error::data("no forecast slices"));
    }
    if context.is_empty() {
        return Ok(forecast.to_vec());
    }
    let cadence = if forecast.len() > 1 {
        forecast[1].time_h - forecast[0].time_h
    } else if context.len() > 1 {
        context[1].time_h - context[0].time_h
    } else {
        forecast[0].time_h - context[0].time_h
    };
    if cadence <= 0 {
        return Err(Error::data("non-increasing slice times"));
    }
    let mut all: Vec<TimeSlice> = context.to_vec();
    all.extend_from_slice(forecast);
    for pair in all.windows(2) {
        if pair[1].time_h - pair[0].time_h != cadence {
            return Err(Error::data(format!(
                "time gap at or around the context splice: {} -> {} with cadence {cadence}",
                pair[0].time_h, pair[1].time_h
            )));
        }
    }
    Ok(all)
}

/// Restrict tracks to candidates within a reporting window, dropping
/// tracks that leave no candidates. Used to clip context-extended tracker
/// output back to forecast validity times (and lead times at most 9 days,
/// 216 h, even when longer forecasts were supplied).
pub fn clip_tracks(tracks: &[CycloneTrack], min_time_h: i64, max_time_h: i64) -> Vec<CycloneTrack> {
    tracks
        .iter()
        .filter_map(|t| {
            let candidates: Vec<CycloneCandidate> = t
                .candidates
                .iter()
                .filter(|c| c.time_h >= min_time_h && c.time_h <= max_time_h)
                .cloned()
                .collect();
            if candidates.is_empty() {
                None
            } else {
                Some(CycloneTrack { candidates })
            }
        })
        .collect()
}

/// Default reporting horizon: 9 days of lead time.
pub const MAX_REPORT_LEAD_H: i64 = 216;

/// Write tracks as CSV with columns
/// `member,track_id,time_h,lat,lon,msl_pa,wind_ms`.
pub fn write_tracks_csv<W: std::io::Write>(
    writer: W,
    tracks_per_member: &[Vec<CycloneTrack>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["member", "track_id", "time_h", "lat", "lon", "msl_pa", "wind_ms"])
        .map_err(|e| Error::format(format!("track export: {e}")))?;
    for (mi, tracks) in tracks_per_member.iter().enumerate() {
        for (ti, track) in tracks.iter().enumerate() {
            for c in &track.candidates {
                w.write_record([
                    mi.to_string(),
                    ti.to_string(),
                    c.time_h.to_string(),
                    format!("{:.3}", c.lat),
                    format!("{:.3}", c.lon),
                    format!("{:.1}", c.msl_pa),
                    format!("{:.2}", c.wind_speed_ms),
                ])
                .map_err(|e| Error::format(format!("track export: {e}")))?;
            }
        }
    }
    w.flush().map_err(|e| Error::format(format!("track export: {e}")))?;
    Ok(())
}
