//! Spherical-harmonic analysis and synthesis on equiangular grids.
//!
//! Real, 4pi-normalized harmonics: `Y_{l,0} = Pbar_{l,0}(sin(lat))`,
//! `Y_{l,m}^cos = sqrt(2) Pbar_{l,m} cos(m lon)`, `Y_{l,m}^sin = sqrt(2)
//! Pbar_{l,m} sin(m lon)`, with fully-normalized associated Legendre
//! functions `Pbar` (no Condon-Shortley phase), so that the area-weighted
//! mean square of a field equals the sum of its squared coefficients.
//!
//! Latitude integration uses interpolatory weights on the grid's own rows:
//! Clenshaw-Curtis weights when the rows include the poles, Fejer weights
//! when they are cell-centered. Both are exact for polynomials in sin(lat)
//! up to degree `n_lat - 1`, so analysis of a field band-limited to
//! `l <= (n_lat - 1) / 2` is exact, which is the bound enforced by
//! [`analysis_band_limit`]. Longitude is handled by FFT.

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Real spherical-harmonic coefficients up to degree `l_max`.
///
/// Storage is triangular: entry `(l, m)` of the cosine (and, for `m >= 1`,
/// sine) part lives at `l * (l + 1) / 2 + m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    l_max: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl ShCoeffs {
    /// All-zero coefficients up to `l_max`.
    pub fn zeros(l_max: usize) -> Self {
        let n = (l_max + 1) * (l_max + 2) / 2;
        ShCoeffs {
            l_max,
            cos: vec![0.0; n],
            sin: vec![0.0; n],
        }
    }

    /// Truncation degree.
    pub fn l_max(&self) -> usize {
        self.l_max
    }

    #[inline]
    fn idx(l: usize, m: usize) -> usize {
        l * (l + 1) / 2 + m
    }

    /// Cosine-part coefficient (the only part for `m = 0`).
    #[inline]
    pub fn cos_coeff(&self, l: usize, m: usize) -> f64 {
        self.cos[Self::idx(l, m)]
    }

    /// Sine-part coefficient, zero for `m = 0`.
    #[inline]
    pub fn sin_coeff(&self, l: usize, m: usize) -> f64 {
        self.sin[Self::idx(l, m)]
    }

    /// Set the cosine-part coefficient.
    pub fn set_cos(&mut self, l: usize, m: usize, v: f64) {
        self.cos[Self::idx(l, m)] = v;
    }

    /// Set the sine-part coefficient (`m >= 1`).
    pub fn set_sin(&mut self, l: usize, m: usize, v: f64) {
        debug_assert!(m >= 1, "sine part only exists for m >= 1");
        self.sin[Self::idx(l, m)] = v;
    }

    /// Per-degree power: sum over orders of squared coefficients.
    pub fn degree_power(&self) -> Vec<f64> {
        let mut power = vec![0.0; self.l_max + 1];
        for l in 0..=self.l_max {
            let mut p = self.cos_coeff(l, 0).powi(2);
            for m in 1..=l {
                p += self.cos_coeff(l, m).powi(2) + self.sin_coeff(l, m).powi(2);
            }
            power[l] = p;
        }
        power
    }
}

/// Latitude-row registration of an equiangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Registration {
    /// Rows at `90 - i * 180 / (n - 1)`, poles included.
    PoleInclusive,
    /// Rows at `90 - (i + 1/2) * 180 / n`.
    CellCentered,
}

fn detect_registration(grid: &LatLonGrid) -> Result<Registration> {
    let lats = grid.latitudes();
    let n = lats.len();
    let pole_ok = (0..n).all(|i| {
        let expect = 90.0 - i as f64 * 180.0 / (n - 1) as f64;
        (lats[i] - expect).abs() < 1e-9
    });
    if pole_ok {
        return Ok(Registration::PoleInclusive);
    }
    let centered_ok = (0..n).all(|i| {
        let expect = 90.0 - (i as f64 + 0.5) * 180.0 / n as f64;
        (lats[i] - expect).abs() < 1e-9
    });
    if centered_ok {
        return Ok(Registration::CellCentered);
    }
    Err(Error::data(
        "spectral transforms require an equiangular grid (pole-inclusive or cell-centered rows)",
    ))
}

/// Interpolatory latitude quadrature weights for the grid rows.
///
/// Weights `w_j` satisfy `sum_j w_j q(x_j) = integral of q over [-1, 1]`
/// exactly for polynomials `q` of degree `<= n_lat - 1`, where
/// `x_j = sin(lat_j)`. They sum to 2.
pub fn quadrature_weights(grid: &LatLonGrid) -> Result<Vec<f64>> {
    let n = grid.n_lat();
    match detect_registration(grid)? {
        Registration::PoleInclusive => {
            // Clenshaw-Curtis on x_j = cos(j pi / N), N = n - 1 intervals.
            let nn = n - 1;
            let mut w = Vec::with_capacity(n);
            for j in 0..n {
                let theta = j as f64 * PI / nn as f64;
                let mut s = 1.0;
                for k in 1..=nn / 2 {
                    let b = if 2 * k == nn { 1.0 } else { 2.0 };
                    s -= b * (2.0 * k as f64 * theta).cos() / ((4 * k * k - 1) as f64);
                }
                let c = if j == 0 || j == nn { 1.0 } else { 2.0 };
                w.push(c * s / nn as f64);
            }
            Ok(w)
        }
        Registration::CellCentered => {
            // Fejer rule on x_j = cos((2j + 1) pi / (2n)).
            let mut w = Vec::with_capacity(n);
            for j in 0..n {
                let theta = (2 * j + 1) as f64 * PI / (2 * n) as f64;
                let mut s = 1.0;
                for k in 1..=n / 2 {
                    s -= 2.0 * (2.0 * k as f64 * theta).cos() / ((4 * k * k - 1) as f64);
                }
                w.push(2.0 * s / n as f64);
            }
            Ok(w)
        }
    }
}

/// Largest degree whose analysis is quadrature-exact on this grid.
pub fn analysis_band_limit(grid: &LatLonGrid) -> usize {
    let lat_limit = (grid.n_lat() - 1) / 2;
    // Alias-free longitude analysis of order pairs needs 2 m_max < n_lon.
    let lon_limit = (grid.n_lon() - 1) / 2;
    lat_limit.min(lon_limit)
}

/// Largest degree representable on this grid for synthesis.
pub fn synthesis_band_limit(grid: &LatLonGrid) -> usize {
    let lon_limit = (grid.n_lon() - 1) / 2;
    (grid.n_lat() - 1).min(lon_limit)
}

/// Fully-normalized associated Legendre values for one `m` at one `x`.
///
/// Fills `out[l - m] = Pbar_{l,m}(x)` for `l = m..=l_max` via the stable
/// three-term recurrence.
fn legendre_column(l_max: usize, m: usize, x: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), l_max + 1 - m);
    let s = (1.0 - x * x).max(0.0).sqrt();
    // Seed Pbar_{m,m}.
    let mut pmm = 1.0;
    for k in 1..=m {
        pmm *= s * ((2 * k + 1) as f64 / (2 * k) as f64).sqrt();
    }
    out[0] = pmm;
    if l_max == m {
        return;
    }
    let mut pm1 = pmm;
    let mut pm2 = 0.0;
    for l in (m + 1)..=l_max {
        let lf = l as f64;
        let mf = m as f64;
        let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
        let b = if l >= m + 2 {
            (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt()
        } else {
            0.0
        };
        let p = a * (x * pm1 - b * pm2);
        out[l - m] = p;
        pm2 = pm1;
        pm1 = p;
    }
}

/// Per-row Fourier coefficients of a field in longitude.
///
/// Returns, for each row, complex `H_m` for `m = 0..=m_max` with the phase
/// referenced to longitude 0 (grids starting elsewhere are corrected).
fn longitude_fft(grid: &LatLonGrid, field: &[f64], m_max: usize) -> Vec<Vec<Complex<f64>>> {
    let n_lat = grid.n_lat();
    let n_lon = grid.n_lon();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_lon);
    let lon0 = grid.longitudes()[0].to_radians();
    let mut rows = Vec::with_capacity(n_lat);
    let mut buf = vec![Complex::new(0.0, 0.0); n_lon];
    for i in 0..n_lat {
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(field[i * n_lon + k], 0.0);
        }
        fft.process(&mut buf);
        let mut row = Vec::with_capacity(m_max + 1);
        for m in 0..=m_max {
            let phase = Complex::from_polar(1.0, -(m as f64) * lon0);
            row.push(buf[m] * phase / n_lon as f64);
        }
        rows.push(row);
    }
    rows
}

/// Spherical-harmonic analysis of a field, exact for inputs band-limited to
/// `l_max <= analysis_band_limit(grid)`.
pub fn analyze(grid: &LatLonGrid, field: &[f64], l_max: usize) -> Result<ShCoeffs> {
    if field.len() != grid.n_cells() {
        return Err(Error::dims(format!(
            "field has {} values for a grid of {} cells",
            field.len(),
            grid.n_cells()
        )));
    }
    let limit = analysis_band_limit(grid);
    if l_max > limit {
        return Err(Error::config(format!(
            "analysis l_max {l_max} exceeds quadrature-exact limit {limit} for this grid"
        )));
    }
    let w = quadrature_weights(grid)?;
    let rows = longitude_fft(grid, field, l_max);
    let n_lat = grid.n_lat();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut coeffs = ShCoeffs::zeros(l_max);
    let mut pl = vec![0.0; l_max + 1];
    for m in 0..=l_max {
        let mut acc_cos = vec![0.0; l_max + 1 - m];
        let mut acc_sin = vec![0.0; l_max + 1 - m];
        for j in 0..n_lat {
            let x = grid.latitudes()[j].to_radians().sin();
            let col = &mut pl[..l_max + 1 - m];
            legendre_column(l_max, m, x, col);
            let h = rows[j][m];
            let (gc, gs) = if m == 0 {
                (h.re, 0.0)
            } else {
                (sqrt2 * h.re, -sqrt2 * h.im)
            };
            let half_w = 0.5 * w[j];
            for (li, &p) in col.iter().enumerate() {
                acc_cos[li] += half_w * p * gc;
                if m > 0 {
                    acc_sin[li] += half_w * p * gs;
                }
            }
        }
        for l in m..=l_max {
            coeffs.set_cos(l, m, acc_cos[l - m]);
            if m > 0 {
                coeffs.set_sin(l, m, acc_sin[l - m]);
            }
        }
    }
    Ok(coeffs)
}

/// Spherical-harmonic synthesis of coefficients onto a grid (exact
/// evaluation of the truncated expansion).
pub fn synthesize(grid: &LatLonGrid, coeffs: &ShCoeffs) -> Result<Vec<f64>> {
    let l_max = coeffs.l_max();
    if l_max > synthesis_band_limit(grid) {
        return Err(Error::config(format!(
            "synthesis l_max {l_max} exceeds grid limit {}",
            synthesis_band_limit(grid)
        )));
    }
    detect_registration(grid)?;
    let n_lat = grid.n_lat();
    let n_lon = grid.n_lon();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(n_lon);
    let lon0 = grid.longitudes()[0].to_radians();
    let inv_sqrt2 = 0.5 * std::f64::consts::SQRT_2; // sqrt(2)/2
    let mut field = vec![0.0; grid.n_cells()];
    let mut buf = vec![Complex::new(0.0, 0.0); n_lon];
    let mut pl = vec![0.0; l_max + 1];
    for j in 0..n_lat {
        let x = grid.latitudes()[j].to_radians().sin();
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for m in 0..=l_max {
            let col = &mut pl[..l_max + 1 - m];
            legendre_column(l_max, m, x, col);
            let mut gc = 0.0;
            let mut gs = 0.0;
            for l in m..=l_max {
                let p = col[l - m];
                gc += coeffs.cos_coeff(l, m) * p;
                if m > 0 {
                    gs += coeffs.sin_coeff(l, m) * p;
                }
            }
            let phase = Complex::from_polar(1.0, m as f64 * lon0);
            if m == 0 {
                buf[0] += Complex::new(gc, 0.0) * phase;
            } else {
                let c = Complex::new(inv_sqrt2 * gc, -inv_sqrt2 * gs) * phase;
                buf[m] += c;
                buf[n_lon - m] += c.conj();
            }
        }
        fft.process(&mut buf);
        for k in 0..n_lon {
            field[j * n_lon + k] = buf[k].re;
        }
    }
    Ok(field)
}

/// Evaluate a spectral field at one point (degrees). Useful for sampling
/// band-limited fields at arbitrary locations, e.g. under rotations.
pub fn evaluate_point(coeffs: &ShCoeffs, lat: f64, lon: f64) -> f64 {
    let l_max = coeffs.l_max();
    let x = lat.to_radians().sin();
    let lam = lon.to_radians();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut pl = vec![0.0; l_max + 1];
    let mut total = 0.0;
    for m in 0..=l_max {
        let col = &mut pl[..l_max + 1 - m];
        legendre_column(l_max, m, x, col);
        let mut gc = 0.0;
        let mut gs = 0.0;
        for l in m..=l_max {
            let p = col[l - m];
            gc += coeffs.cos_coeff(l, m) * p;
            if m > 0 {
                gs += coeffs.sin_coeff(l, m) * p;
            }
        }
        if m == 0 {
            total += gc;
        } else {
            let ml = m as f64 * lam;
            // Matches the row synthesis: real harmonics carry sqrt(2).
            total += sqrt2 * (gc * ml.cos() + gs * ml.sin());
        }
    }
    total
}

/// Exact area-weighted mean square of a band-limited field: the discrete
/// form of `(1/4pi) * integral of field^2 over the sphere`, using the
/// quadrature weights (exact when the field is band-limited to
/// `analysis_band_limit(grid)`).
pub fn area_weighted_mean_square(grid: &LatLonGrid, field: &[f64]) -> Result<f64> {
    if field.len() != grid.n_cells() {
        return Err(Error::dims("field length does not match grid".to_string()));
    }
    let w = quadrature_weights(grid)?;
    let n_lon = grid.n_lon();
    let mut total = 0.0;
    for j in 0..grid.n_lat() {
        let mut row = 0.0;
        for k in 0..n_lon {
            let v = field[j * n_lon + k];
            row += v * v;
        }
        total += 0.5 * w[j] * row / n_lon as f64;
    }
    Ok(total)
}
