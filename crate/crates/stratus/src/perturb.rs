//! Stochastic field generation on the sphere: band-limited isotropic
//! Gaussian noise (the diffusion driving noise), Gaussian-process
//! initial-condition perturbations with a compactly supported isotropic
//! correlation, analysis-ensemble-style perturbation assembly, and
//! spherical power spectra.

use crate::error::{Error, Result};
use crate::fields::{ChannelMeta, FieldSet};
use crate::grid::{GriddedField, LatLonGrid};
use crate::numerics::gauss_legendre;
use crate::rng::substream;
use crate::sht::{analysis_band_limit, analyze, synthesis_band_limit, synthesize, ShCoeffs};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Band-limited isotropic Gaussian noise specification.
///
/// Expected power is flat across degrees `0..=l_max` and zero beyond, and
/// the per-cell variance is exactly `sigma^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalNoiseSpec {
    /// Grid the noise is synthesized on.
    pub grid: LatLonGrid,
    /// Truncation degree; at most the grid's resolvable limit.
    pub l_max: usize,
    /// Per-cell standard deviation (non-negative).
    pub sigma: f64,
}

impl SphericalNoiseSpec {
    fn validate(&self) -> Result<()> {
        let limit = synthesis_band_limit(&self.grid);
        if self.l_max > limit {
            return Err(Error::config(format!(
                "noise truncation {} exceeds the grid's resolvable degree {limit}",
                self.l_max
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!(
                "noise level must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

const NOISE_STREAM: u64 = 0x6e6f_6973_655f_7368;

/// Draw the spectral coefficients of one noise sample: independent
/// zero-mean Gaussians with per-degree total power `sigma^2 / (l_max + 1)`.
pub fn sample_noise_coeffs(spec: &SphericalNoiseSpec, seed: u64) -> Result<ShCoeffs> {
    spec.validate()?;
    let l_max = spec.l_max;
    let mut coeffs = ShCoeffs::zeros(l_max);
    let mut rng = substream(seed, &[NOISE_STREAM]);
    let degrees = (l_max + 1) as f64;
    for l in 0..=l_max {
        // (2l + 1) coefficients share the degree's power budget.
        let sd = (spec.sigma * spec.sigma / (degrees * (2 * l + 1) as f64)).sqrt();
        let z: f64 = StandardNormal.sample(&mut rng);
        coeffs.set_cos(l, 0, sd * z);
        for m in 1..=l {
            let zc: f64 = StandardNormal.sample(&mut rng);
            let zs: f64 = StandardNormal.sample(&mut rng);
            coeffs.set_cos(l, m, sd * zc);
            coeffs.set_sin(l, m, sd * zs);
        }
    }
    Ok(coeffs)
}

/// Sample one isotropic noise field on the grid.
pub fn sample_spherical_noise(spec: &SphericalNoiseSpec, seed: u64) -> Result<GriddedField> {
    let coeffs = sample_noise_coeffs(spec, seed)?;
    let values = synthesize(&spec.grid, &coeffs)?;
    GriddedField::new(spec.grid.clone(), values)
}

/// Per-degree power of a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// `power[l]` is the summed squared coefficient magnitude of degree l;
    /// the sum over l equals the area-weighted mean square of the field.
    pub power: Vec<f64>,
}

/// Spatial power spectrum by forward spherical-harmonic analysis up to the
/// grid's exact analysis limit.
pub fn power_spectrum(field: &GriddedField) -> Result<SpectrumResult> {
    let l_max = analysis_band_limit(&field.grid);
    let coeffs = analyze(&field.grid, &field.values, l_max)?;
    Ok(SpectrumResult {
        power: coeffs.degree_power(),
    })
}

/// Compactly supported piecewise-rational correlation function with a
/// Gaussian-like shape; `c` is the half-support (zero beyond `2c`).
///
/// The curvature at the origin matches a Gaussian with characteristic
/// length `c * sqrt(3/10)`.
pub fn gaspari_cohn(distance: f64, c: f64) -> f64 {
    assert!(c > 0.0, "support parameter must be positive");
    let z = (distance / c).abs();
    if z <= 1.0 {
        ((((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z) + 1.0
    } else if z <= 2.0 {
        (((( z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0
            - 2.0 / (3.0 * z)
    } else {
        0.0
    }
}

/// Target standard deviation for one perturbed variable/level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableStd {
    /// Variable short name.
    pub variable: String,
    /// Pressure level, absent for surface variables.
    pub level_hpa: Option<u16>,
    /// Standard deviation of 6-hour differences of the variable.
    pub std_6h_diff: f64,
}

/// Gaussian-process initial-condition perturbation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPerturbSpec {
    /// Horizontal decorrelation lengthscale in km.
    pub lengthscale_km: f64,
    /// Fraction of the 6-hour-difference std used as perturbation std.
    pub scale_factor: f64,
    /// Perturbed variables/levels with their target stds.
    pub targets: Vec<VariableStd>,
}

impl GpPerturbSpec {
    /// Paper defaults: 1200 km lengthscale, 0.085 scale factor.
    pub fn with_defaults(targets: Vec<VariableStd>) -> Self {
        GpPerturbSpec {
            lengthscale_km: 1200.0,
            scale_factor: 0.085,
            targets,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lengthscale_km > 0.0) {
            return Err(Error::config("GP lengthscale must be positive"));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(Error::config(format!(
                "GP scale factor must be in (0, 1), got {}",
                self.scale_factor
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::config("GP perturbation has no target variables"));
        }
        for t in &self.targets {
            if !(t.std_6h_diff > 0.0) || !t.std_6h_diff.is_finite() {
                return Err(Error::config(format!(
                    "missing or invalid std entry for {} ({:?})",
                    t.variable, t.level_hpa
                )));
            }
        }
        Ok(())
    }
}

/// Spectral truncation cap for GP sampling: the kernel's spectrum at the
/// default lengthscale is negligible well below this degree.
const GP_L_MAX_CAP: usize = 255;

/// Per-degree coefficient variances giving unit marginal variance and the
/// kernel's correlation structure (band-limited to `l_max`).
///
/// The kernel acts on chordal distance; its Legendre coefficients are
/// computed by Gauss-Legendre quadrature, floored at zero, and
/// renormalized so the variances sum to one.
pub fn gp_degree_variances(lengthscale_km: f64, l_max: usize) -> Vec<f64> {
    let c_km = lengthscale_km * (10.0f64 / 3.0).sqrt();
    let n_quad = 2 * (l_max + 1) + 64;
    let (nodes, weights) = gauss_legendre(n_quad);
    // a_l = (2l + 1)/2 * integral of k(t) P_l(t) dt over [-1, 1].
    let mut a = vec![0.0; l_max + 1];
    for (&t, &w) in nodes.iter().zip(&weights) {
        let chord_km = crate::EARTH_RADIUS_KM * (2.0 * (1.0 - t)).max(0.0).sqrt();
        let k = gaspari_cohn(chord_km, c_km);
        if k == 0.0 {
            continue;
        }
        let mut p_prev = 0.0;
        let mut p = 1.0;
        for (l, slot) in a.iter_mut().enumerate() {
            *slot += w * k * p * (2 * l + 1) as f64 / 2.0;
            let p_next = if l == 0 {
                t
            } else {
                ((2 * l + 1) as f64 * t * p - l as f64 * p_prev) / (l + 1) as f64
            };
            p_prev = p;
            p = p_next;
        }
    }
    for v in a.iter_mut() {
        *v = v.max(0.0);
    }
    let total: f64 = a.iter().sum();
    // v_l = a_l / (2l + 1) per coefficient; unit sum over degrees.
    a.iter()
        .enumerate()
        .map(|(l, &al)| al / (total * (2 * l + 1) as f64))
        .collect()
}

/// Band-limited correlation function value at a central angle (radians)
/// implied by per-degree variances from [`gp_degree_variances`].
pub fn gp_band_limited_correlation(degree_variances: &[f64], central_angle_rad: f64) -> f64 {
    let t = central_angle_rad.cos();
    let mut p_prev = 0.0;
    let mut p = 1.0;
    let mut acc = 0.0;
    for (l, &v) in degree_variances.iter().enumerate() {
        acc += v * (2 * l + 1) as f64 * p;
        let p_next = if l == 0 {
            t
        } else {
            ((2 * l + 1) as f64 * t * p - l as f64 * p_prev) / (l + 1) as f64
        };
        p_prev = p;
        p = p_next;
    }
    acc
}

const GP_STREAM: u64 = 0x6770_7065_7274_7572;

/// Sample Gaussian-process perturbation fields: one horizontal pattern per
/// variable (shared across that variable's levels, to be reused verbatim
/// across input timesteps), scaled so the marginal std of each channel is
/// `scale_factor * std_6h_diff`.
pub fn gp_perturbation(spec: &GpPerturbSpec, grid: &LatLonGrid, seed: u64) -> Result<FieldSet> {
    spec.validate()?;
    let l_max = synthesis_band_limit(grid).min(GP_L_MAX_CAP);
    let variances = gp_degree_variances(spec.lengthscale_km, l_max);

    // One unit-variance pattern per distinct variable, in order of first
    // appearance.
    let mut var_names: Vec<&str> = Vec::new();
    for t in &spec.targets {
        if !var_names.contains(&t.variable.as_str()) {
            var_names.push(&t.variable);
        }
    }
    let mut patterns = Vec::with_capacity(var_names.len());
    for (vi, _) in var_names.iter().enumerate() {
        let mut rng = substream(seed, &[GP_STREAM, vi as u64]);
        let mut coeffs = ShCoeffs::zeros(l_max);
        for (l, &v) in variances.iter().enumerate() {
            let sd = v.sqrt();
            let z: f64 = StandardNormal.sample(&mut rng);
            coeffs.set_cos(l, 0, sd * z);
            for m in 1..=l {
                let zc: f64 = StandardNormal.sample(&mut rng);
                let zs: f64 = StandardNormal.sample(&mut rng);
                coeffs.set_cos(l, m, sd * zc);
                coeffs.set_sin(l, m, sd * zs);
            }
        }
        patterns.push(synthesize(grid, &coeffs)?);
    }

    let channels: Vec<ChannelMeta> = spec
        .targets
        .iter()
        .map(|t| ChannelMeta {
            variable: t.variable.clone(),
            level_hpa: t.level_hpa,
        })
        .collect();
    let mut out = FieldSet::zeros(grid.clone(), channels);
    for (ci, t) in spec.targets.iter().enumerate() {
        let vi = var_names.iter().position(|v| *v == t.variable).unwrap();
        let scale = spec.scale_factor * t.std_6h_diff;
        let dst = out.channel_mut(ci);
        for (d, &s) in dst.iter_mut().zip(&patterns[vi]) {
            *d = scale * s;
        }
    }
    Ok(out)
}

/// Build perturbed analyses: add each member's deviation from the member
/// mean to the deterministic analysis. The mean of the outputs equals the
/// deterministic analysis exactly.
pub fn eda_style_perturb(
    det_analysis: &GriddedField,
    members: &[GriddedField],
) -> Result<Vec<GriddedField>> {
    if members.len() < 2 {
        return Err(Error::data(format!(
            "perturbation assembly needs >= 2 members, got {}",
            members.len()
        )));
    }
    for m in members {
        if m.grid != det_analysis.grid {
            return Err(Error::dims(
                "member grid differs from the deterministic analysis grid",
            ));
        }
    }
    let n = det_analysis.values.len();
    let inv = 1.0 / members.len() as f64;
    let mut mean = vec![0.0; n];
    for m in members {
        for (acc, &v) in mean.iter_mut().zip(&m.values) {
            *acc += v * inv;
        }
    }
    members
        .iter()
        .map(|m| {
            let values = (0..n)
                .map(|i| det_analysis.values[i] + (m.values[i] - mean[i]))
                .collect();
            GriddedField::new(det_analysis.grid.clone(), values)
        })
        .collect()
}

/// Bilinearly upsample a coarse field to a target grid.
///
/// NaN donor cells are dropped and the remaining donor weights
/// renormalized; where all four donors are NaN the value falls back to the
/// `fallback` field (which must live on the target grid), or stays NaN
/// when no fallback is given.
pub fn upsample_field(
    coarse: &GriddedField,
    target: &LatLonGrid,
    fallback: Option<&GriddedField>,
) -> Result<GriddedField> {
    if let Some(f) = fallback {
        if f.grid != *target {
            return Err(Error::dims("fallback field is not on the target grid"));
        }
    }
    let src = &coarse.grid;
    let lats = src.latitudes();
    let lons = src.longitudes();
    let n_lon = src.n_lon();
    let spacing = src.lon_spacing();
    let lon0 = lons[0];
    let mut values = Vec::with_capacity(target.n_cells());
    for cell in 0..target.n_cells() {
        let (lat, lon) = target.cell_center(cell);
        // Longitude bracket (periodic).
        let pos = (lon - lon0).rem_euclid(360.0) / spacing;
        let i0 = (pos.floor() as usize).min(n_lon - 1);
        let wx = pos - i0 as f64;
        let i1 = (i0 + 1) % n_lon;
        // Latitude bracket (lats strictly decreasing), clamped at the
        // outermost rows.
        let (j0, j1, wy) = if lat >= lats[0] {
            (0, 0, 0.0)
        } else if lat <= lats[lats.len() - 1] {
            (lats.len() - 1, lats.len() - 1, 0.0)
        } else {
            let hi = lats.partition_point(|&v| v > lat);
            let lo = hi - 1;
            (lo, hi, (lats[lo] - lat) / (lats[lo] - lats[hi]))
        };
        let donors = [
            (j0 * n_lon + i0, (1.0 - wy) * (1.0 - wx)),
            (j0 * n_lon + i1, (1.0 - wy) * wx),
            (j1 * n_lon + i0, wy * (1.0 - wx)),
            (j1 * n_lon + i1, wy * wx),
        ];
        let mut num = 0.0;
        let mut den = 0.0;
        for (idx, w) in donors {
            let v = coarse.values[idx];
            if v.is_finite() && w > 0.0 {
                num += w * v;
                den += w;
            }
        }
        values.push(if den > 0.0 {
            num / den
        } else if let Some(f) = fallback {
            f.values[cell]
        } else {
            f64::NAN
        });
    }
    GriddedField::new(target.clone(), values)
}
