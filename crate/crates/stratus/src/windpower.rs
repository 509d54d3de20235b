//! Regional wind-power forecast evaluation: turbine power-curve
//! conversion at wind-farm locations, capacity aggregation over pooling
//! groups, CRPS of summed regional power, and lead-time interpolation of
//! CRPS curves.

use crate::error::{Error, Result};
use crate::grid::{bilinear_interpolate, geodesic_distance_km, AreaWeights, GriddedField};
use crate::mesh::IcosahedralMesh;
use crate::metrics::{self, BatchMeta, EnsembleBatch, TargetBatch};
use serde::{Deserialize, Serialize};

/// A wind farm site with its nominal generating capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindFarm {
    pub lat: f64,
    pub lon: f64,
    pub capacity_mw: f64,
}

impl WindFarm {
    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::data(format!("farm latitude {} invalid", self.lat)));
        }
        if !self.lon.is_finite() {
            return Err(Error::data(format!("farm longitude {} invalid", self.lon)));
        }
        if !(self.capacity_mw > 0.0) || !self.capacity_mw.is_finite() {
            return Err(Error::data(format!(
                "farm capacity must be positive, got {}",
                self.capacity_mw
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct FarmRecord {
    latitude: f64,
    longitude: f64,
    capacity_mw: f64,
}

/// Read wind farms from CSV with columns `latitude, longitude,
/// capacity_mw` (extra columns are ignored).
pub fn read_farms_csv<R: std::io::Read>(reader: R) -> Result<Vec<WindFarm>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut farms = Vec::new();
    for rec in rdr.deserialize() {
        let rec: FarmRecord = rec.map_err(|e| Error::format(format!("farm CSV: {e}")))?;
        let farm = WindFarm {
            lat: rec.latitude,
            lon: rec.longitude,
            capacity_mw: rec.capacity_mw,
        };
        farm.validate()?;
        farms.push(farm);
    }
    if farms.is_empty() {
        return Err(Error::data("farm CSV contains no farms"));
    }
    Ok(farms)
}

/// A piecewise-linear normalized turbine power curve: wind speed (m/s)
/// to load factor in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    speeds: Vec<f64>,
    factors: Vec<f64>,
}

impl PowerCurve {
    /// Validate and build a curve from (speed, load factor) pairs. The
    /// table must start and end at zero output (calm below cut-in,
    /// curtailed above cut-out), reach exactly 1 at some rated speed,
    /// stay within [0, 1], and not decrease before first reaching rated
    /// output.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::data("power curve needs at least 3 points"));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::data(format!(
                    "power-curve speeds must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if points[0].0 < 0.0 || !points[0].0.is_finite() {
            return Err(Error::data("power-curve speeds must be non-negative"));
        }
        for &(s, f) in &points {
            if !s.is_finite() || !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(Error::data(format!(
                    "load factor {f} at speed {s} outside [0, 1]"
                )));
            }
        }
        if points[0].1 != 0.0 {
            return Err(Error::data("power curve must be zero below cut-in"));
        }
        if points.last().unwrap().1 != 0.0 {
            return Err(Error::data("power curve must be zero above cut-out"));
        }
        let rated = points.iter().position(|&(_, f)| f == 1.0).ok_or_else(|| {
            Error::data("power curve never reaches rated (load factor 1) output")
        })?;
        for w in points[..=rated].windows(2) {
            if w[1].1 < w[0].1 {
                return Err(Error::data(
                    "power curve decreases before reaching rated output",
                ));
            }
        }
        let (speeds, factors) = points.into_iter().unzip();
        Ok(PowerCurve { speeds, factors })
    }

    /// Read a curve from CSV with columns `wind_speed_ms, normalized_power`.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            wind_speed_ms: f64,
            normalized_power: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        for rec in rdr.deserialize() {
            let row: Row = rec.map_err(|e| Error::format(format!("power-curve CSV: {e}")))?;
            points.push((row.wind_speed_ms, row.normalized_power));
        }
        PowerCurve::new(points)
    }

    /// The bundled idealized IEC Class II turbine curve: cut-in at
    /// 3 m/s, a cubic ramp to rated output at 14 m/s, curtailment at
    /// 25 m/s.
    pub fn iec_class2() -> Self {
        PowerCurve::from_csv(
            include_str!("../data/power_curve_iec2.csv").as_bytes(),
        )
        .expect("bundled power curve is valid")
    }

    /// Load factor at a wind speed: linear interpolation inside the
    /// table, clamped to the (zero) end values outside it.
    pub fn load_factor(&self, speed: f64) -> Result<f64> {
        if !speed.is_finite() || speed < 0.0 {
            return Err(Error::data(format!("wind speed {speed} invalid")));
        }
        let n = self.speeds.len();
        if speed <= self.speeds[0] {
            return Ok(self.factors[0]);
        }
        if speed >= self.speeds[n - 1] {
            return Ok(self.factors[n - 1]);
        }
        let hi = self.speeds.partition_point(|&s| s < speed).min(n - 1);
        let lo = hi - 1;
        if self.speeds[hi] == speed {
            return Ok(self.factors[hi]);
        }
        let t = (speed - self.speeds[lo]) / (self.speeds[hi] - self.speeds[lo]);
        Ok(self.factors[lo] + t * (self.factors[hi] - self.factors[lo]))
    }
}

/// Interpolate a gridded wind-speed field to the farm locations
/// (bilinear in latitude and longitude).
pub fn interpolate_farm_speeds(speed: &GriddedField, farms: &[WindFarm]) -> Result<Vec<f64>> {
    farms
        .iter()
        .map(|f| Ok(bilinear_interpolate(&speed.grid, &speed.values, f.lat, f.lon)?.value))
        .collect()
}

/// Convert per-member wind speeds at the farms into per-member generated
/// power (MW) per farm: load factor times nominal capacity.
pub fn farm_power(
    member_speeds: &[Vec<f64>],
    farms: &[WindFarm],
    curve: &PowerCurve,
) -> Result<Vec<Vec<f64>>> {
    if member_speeds.is_empty() {
        return Err(Error::dims("no ensemble members"));
    }
    member_speeds
        .iter()
        .map(|speeds| {
            if speeds.len() != farms.len() {
                return Err(Error::dims(format!(
                    "{} farm speeds for {} farms",
                    speeds.len(),
                    farms.len()
                )));
            }
            speeds
                .iter()
                .zip(farms)
                .map(|(&s, farm)| Ok(curve.load_factor(s)? * farm.capacity_mw))
                .collect()
        })
        .collect()
}

/// Groups of farm indices pooled around mesh nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmGroups {
    /// Pool diameter, km.
    pub pool_size_km: f64,
    /// Farm indices per non-empty group, each sorted ascending.
    pub farm_indices: Vec<Vec<usize>>,
}

/// Mesh refinement used for the farm pooling centres.
pub const WIND_POOL_MESH_LEVEL: u8 = 7;

/// Standard pool diameters for the regional wind-power evaluation, km.
pub const WIND_POOL_SIZES_KM: [f64; 3] = [120.0, 240.0, 480.0];

/// Group farms by geodesic distance to the mesh nodes: a farm belongs to
/// every group whose centre lies within half the pool size. Groups with
/// no farms are dropped.
pub fn build_farm_groups(
    farms: &[WindFarm],
    mesh: &IcosahedralMesh,
    pool_size_km: f64,
) -> Result<FarmGroups> {
    if farms.is_empty() {
        return Err(Error::data("no farms to group"));
    }
    if !(pool_size_km > 0.0) || !pool_size_km.is_finite() {
        return Err(Error::config(format!(
            "pool size must be positive, got {pool_size_km} km"
        )));
    }
    for f in farms {
        f.validate()?;
    }
    let radius_km = pool_size_km / 2.0;
    // Conservative latitude window: 1 degree of latitude is ~111.2 km,
    // so a band of radius_km / 111 degrees can only over-include.
    let lat_margin = radius_km / 111.0;
    let mut by_lat: Vec<usize> = (0..farms.len()).collect();
    by_lat.sort_by(|&a, &b| farms[a].lat.partial_cmp(&farms[b].lat).unwrap());
    let lats_sorted: Vec<f64> = by_lat.iter().map(|&i| farms[i].lat).collect();

    let mut groups = Vec::new();
    for node in 0..mesh.n_nodes() {
        let (nlat, nlon) = mesh.node_latlon(node);
        let lo = lats_sorted.partition_point(|&l| l < nlat - lat_margin);
        let hi = lats_sorted.partition_point(|&l| l <= nlat + lat_margin);
        let mut members: Vec<usize> = by_lat[lo..hi]
            .iter()
            .copied()
            .filter(|&i| {
                geodesic_distance_km(farms[i].lat, farms[i].lon, nlat, nlon) <= radius_km
            })
            .collect();
        if !members.is_empty() {
            members.sort_unstable();
            groups.push(members);
        }
    }
    Ok(FarmGroups {
        pool_size_km,
        farm_indices: groups,
    })
}

/// CRPS of regional wind power: farm power is summed within each group
/// and the ensemble CRPS of that summed quantity is averaged, unweighted,
/// over groups (and over init times). Forecast speeds are indexed
/// `[member][init][farm]`, truth speeds `[init][farm]`.
pub fn regional_power_crps(
    forecast_speeds: &[Vec<Vec<f64>>],
    truth_speeds: &[Vec<f64>],
    farms: &[WindFarm],
    groups: &FarmGroups,
    curve: &PowerCurve,
) -> Result<f64> {
    let m = forecast_speeds.len();
    if m == 0 {
        return Err(Error::dims("no ensemble members"));
    }
    let k = truth_speeds.len();
    if k == 0 || forecast_speeds.iter().any(|mem| mem.len() != k) {
        return Err(Error::dims(
            "forecast and truth disagree on the number of init times",
        ));
    }
    let g = groups.farm_indices.len();
    if g == 0 {
        return Err(Error::data("no groups contain farms"));
    }
    if let Some(bad) = groups
        .farm_indices
        .iter()
        .flatten()
        .find(|&&i| i >= farms.len())
    {
        return Err(Error::dims(format!(
            "group references farm {bad} but only {} farms exist",
            farms.len()
        )));
    }

    let group_power = |speeds: &[f64]| -> Result<Vec<f64>> {
        if speeds.len() != farms.len() {
            return Err(Error::dims(format!(
                "{} farm speeds for {} farms",
                speeds.len(),
                farms.len()
            )));
        }
        let per_farm: Vec<f64> = speeds
            .iter()
            .zip(farms)
            .map(|(&s, f)| Ok(curve.load_factor(s)? * f.capacity_mw))
            .collect::<Result<_>>()?;
        Ok(groups
            .farm_indices
            .iter()
            .map(|idx| idx.iter().map(|&i| per_farm[i]).sum())
            .collect())
    };

    let mut ens_values = vec![0.0; m * k * g];
    for (mi, member) in forecast_speeds.iter().enumerate() {
        for (ki, speeds) in member.iter().enumerate() {
            ens_values[(mi * k + ki) * g..(mi * k + ki + 1) * g]
                .copy_from_slice(&group_power(speeds)?);
        }
    }
    let mut tgt_values = vec![0.0; k * g];
    for (ki, speeds) in truth_speeds.iter().enumerate() {
        tgt_values[ki * g..(ki + 1) * g].copy_from_slice(&group_power(speeds)?);
    }

    let meta = BatchMeta {
        variable: "regional_wind_power_mw".to_string(),
        level_hpa: None,
        lead_time_h: 0,
    };
    let ens = EnsembleBatch::dense(meta.clone(), m, k, g, ens_values)?;
    let tgt = TargetBatch::dense(meta, k, g, tgt_values)?;
    metrics::crps(&ens, &tgt, &AreaWeights::uniform(g, 1))
}

/// Linearly interpolate a CRPS-by-lead-time curve at target lead times.
/// Targets outside the sampled range are an error (no extrapolation).
pub fn leadtime_interpolate(samples: &[(f64, f64)], targets: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::data("no lead-time samples"));
    }
    for w in samples.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::data(
                "lead-time samples must be strictly increasing in lead time",
            ));
        }
    }
    if samples.iter().any(|&(t, v)| !t.is_finite() || !v.is_finite()) {
        return Err(Error::data("non-finite lead-time sample"));
    }
    let first = samples[0].0;
    let last = samples[samples.len() - 1].0;
    targets
        .iter()
        .map(|&t| {
            if !(first..=last).contains(&t) {
                return Err(Error::data(format!(
                    "lead time {t} outside the sampled range [{first}, {last}]"
                )));
            }
            let hi = samples
                .partition_point(|&(s, _)| s < t)
                .min(samples.len() - 1);
            if samples[hi].0 == t {
                return Ok(samples[hi].1);
            }
            let lo = hi - 1;
            let (t0, v0) = samples[lo];
            let (t1, v1) = samples[hi];
            Ok(v0 + (t - t0) / (t1 - t0) * (v1 - v0))
        })
        .collect()
}
