//! Regular latitude-longitude grids on the sphere.
//!
//! Grids are global, row-major (north to south, then west to east), with
//! strictly decreasing latitudes and uniformly spaced longitudes. Cell area
//! weights come from the exact band integral between the midpoints of
//! adjacent rows, so they sum to the full sphere's solid angle.

use crate::error::{Error, Result};
use crate::EARTH_RADIUS_KM;
use serde::{Deserialize, Serialize};

/// A global regular latitude-longitude grid.
///
/// `latitudes` are cell-center latitudes in degrees, strictly decreasing,
/// covering the sphere pole to pole (the outermost rows must lie within one
/// row spacing of the poles). `longitudes` are uniform in `[0, 360)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLonGrid {
    latitudes: Vec<f64>,
    longitudes: Vec<f64>,
}

impl LatLonGrid {
    /// Equiangular global grid whose first and last rows sit exactly on the
    /// poles, e.g. `global(721, 1440)` for 0.25 degrees.
    pub fn global(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 || n_lon < 2 {
            return Err(Error::config(format!(
                "grid must have at least 2x2 cells, got {n_lat}x{n_lon}"
            )));
        }
        let dlat = 180.0 / (n_lat - 1) as f64;
        let dlon = 360.0 / n_lon as f64;
        let latitudes = (0..n_lat).map(|i| 90.0 - i as f64 * dlat).collect();
        let longitudes = (0..n_lon).map(|j| j as f64 * dlon).collect();
        Self::from_axes(latitudes, longitudes)
    }

    /// Equiangular global grid with cell-centered rows (no rows on the
    /// poles), e.g. `cell_centered(180, 360)` for 1 degree.
    pub fn cell_centered(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 || n_lon < 2 {
            return Err(Error::config(format!(
                "grid must have at least 2x2 cells, got {n_lat}x{n_lon}"
            )));
        }
        let dlat = 180.0 / n_lat as f64;
        let dlon = 360.0 / n_lon as f64;
        let latitudes = (0..n_lat)
            .map(|i| 90.0 - (i as f64 + 0.5) * dlat)
            .collect();
        let longitudes = (0..n_lon).map(|j| j as f64 * dlon).collect();
        Self::from_axes(latitudes, longitudes)
    }

    /// Build a grid from explicit axes, validating every invariant.
    pub fn from_axes(latitudes: Vec<f64>, longitudes: Vec<f64>) -> Result<Self> {
        if latitudes.len() < 2 || longitudes.len() < 2 {
            return Err(Error::config("grid axes need at least two entries each"));
        }
        for w in latitudes.windows(2) {
            if !(w[0] > w[1]) {
                return Err(Error::data(format!(
                    "latitudes must be strictly decreasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if latitudes[0] > 90.0 || *latitudes.last().unwrap() < -90.0 {
            return Err(Error::data("latitudes must lie in [-90, 90]"));
        }
        let dlon = 360.0 / longitudes.len() as f64;
        for (j, &lon) in longitudes.iter().enumerate() {
            let expect = longitudes[0] + j as f64 * dlon;
            if (lon - expect).abs() > 1e-9 {
                return Err(Error::data(format!(
                    "longitudes must be uniform with spacing {dlon}, entry {j} is {lon}"
                )));
            }
        }
        if longitudes[0] < 0.0 || *longitudes.last().unwrap() >= 360.0 {
            return Err(Error::data("longitudes must lie in [0, 360)"));
        }
        // Global coverage: outermost rows within one row spacing of a pole.
        let north_gap = 90.0 - latitudes[0];
        let south_gap = latitudes.last().unwrap() + 90.0;
        let first_step = latitudes[0] - latitudes[1];
        let last_step = latitudes[latitudes.len() - 2] - latitudes[latitudes.len() - 1];
        if north_gap > first_step * 1.000_001 || south_gap > last_step * 1.000_001 {
            return Err(Error::data(
                "grid does not cover the sphere: outermost rows too far from the poles",
            ));
        }
        Ok(Self {
            latitudes,
            longitudes,
        })
    }

    /// Number of latitude rows.
    pub fn n_lat(&self) -> usize {
        self.latitudes.len()
    }

    /// Number of longitude columns.
    pub fn n_lon(&self) -> usize {
        self.longitudes.len()
    }

    /// Total number of grid cells.
    pub fn n_cells(&self) -> usize {
        self.latitudes.len() * self.longitudes.len()
    }

    /// Cell-center latitudes in degrees, strictly decreasing.
    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    /// Cell-center longitudes in degrees, uniform in `[0, 360)`.
    pub fn longitudes(&self) -> &[f64] {
        &self.longitudes
    }

    /// Longitude spacing in degrees.
    pub fn lon_spacing(&self) -> f64 {
        360.0 / self.longitudes.len() as f64
    }

    /// Flat cell index for (row, column).
    #[inline]
    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.longitudes.len() + col
    }

    /// (row, column) for a flat cell index.
    #[inline]
    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.longitudes.len(), cell % self.longitudes.len())
    }

    /// (latitude, longitude) of a cell center.
    #[inline]
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = self.row_col(cell);
        (self.latitudes[i], self.longitudes[j])
    }

    /// True if the first/last rows sit exactly on the poles.
    pub fn has_pole_rows(&self) -> bool {
        (self.latitudes[0] - 90.0).abs() < 1e-12
            && (self.latitudes[self.latitudes.len() - 1] + 90.0).abs() < 1e-12
    }

    /// Latitude band edges (sines) for each row: midpoints between adjacent
    /// rows, clamped to the poles at the ends. Returned as `(upper, lower)`
    /// sine pairs so that band solid angle is `dlon_rad * (upper - lower)`.
    fn band_sines(&self) -> Vec<(f64, f64)> {
        let n = self.latitudes.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let upper_deg = if i == 0 {
                90.0
            } else {
                0.5 * (self.latitudes[i - 1] + self.latitudes[i])
            };
            let lower_deg = if i == n - 1 {
                -90.0
            } else {
                0.5 * (self.latitudes[i] + self.latitudes[i + 1])
            };
            out.push((upper_deg.to_radians().sin(), lower_deg.to_radians().sin()));
        }
        out
    }

    /// Per-row cell solid angles in steradians; row sum over all cells is
    /// the full sphere (4 pi).
    pub fn row_solid_angles(&self) -> Vec<f64> {
        let dlon_rad = self.lon_spacing().to_radians();
        self.band_sines()
            .iter()
            .map(|(up, lo)| dlon_rad * (up - lo))
            .collect()
    }

    /// Normalized cell area weights (unit mean over all cells).
    pub fn area_weights(&self) -> AreaWeights {
        let angles = self.row_solid_angles();
        let total: f64 = angles.iter().sum::<f64>() * self.longitudes.len() as f64;
        let mean = total / self.n_cells() as f64;
        AreaWeights {
            row_weights: angles.iter().map(|a| a / mean).collect(),
            n_lon: self.longitudes.len(),
        }
    }
}

/// Normalized cell area weights for a [`LatLonGrid`].
///
/// Weights are constant along each row and average to exactly 1 over the
/// grid, so area-weighted means are plain weighted means.
#[derive(Debug, Clone)]
pub struct AreaWeights {
    row_weights: Vec<f64>,
    n_lon: usize,
}

impl AreaWeights {
    /// Uniform weights (all ones); useful for abstract point sets.
    pub fn uniform(n_rows: usize, n_lon: usize) -> Self {
        AreaWeights {
            row_weights: vec![1.0; n_rows],
            n_lon,
        }
    }

    /// One explicit weight per cell, renormalized to unit mean.
    pub fn from_cell_weights(weights: &[f64]) -> crate::Result<Self> {
        if weights.is_empty() {
            return Err(crate::Error::data("empty weight vector"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(crate::Error::data("cell weights must be finite and positive"));
        }
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        Ok(AreaWeights {
            row_weights: weights.iter().map(|w| w / mean).collect(),
            n_lon: 1,
        })
    }

    /// Weight of a flat cell index.
    #[inline]
    pub fn at(&self, cell: usize) -> f64 {
        self.row_weights[cell / self.n_lon]
    }

    /// Weight shared by all cells of a row.
    #[inline]
    pub fn row(&self, row: usize) -> f64 {
        self.row_weights[row]
    }

    /// Number of cells covered.
    pub fn n_cells(&self) -> usize {
        self.row_weights.len() * self.n_lon
    }

    /// Materialize one weight per cell.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_cells());
        for &w in &self.row_weights {
            out.extend(std::iter::repeat(w).take(self.n_lon));
        }
        out
    }
}

/// Unit vector in Earth-centered coordinates for (lat, lon) in degrees.
#[inline]
pub fn unit_vector(lat_deg: f64, lon_deg: f64) -> [f64; 3] {
    let lat = lat_deg.to_radians();
    let lon = lon_deg.to_radians();
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Central angle in radians between two unit vectors (robust atan2 form).
#[inline]
pub fn central_angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cx = a[1] * b[2] - a[2] * b[1];
    let cy = a[2] * b[0] - a[0] * b[2];
    let cz = a[0] * b[1] - a[1] * b[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(dot)
}

/// Great-circle distance in kilometres between two (lat, lon) points in
/// degrees, on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn geodesic_distance_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    EARTH_RADIUS_KM * central_angle(unit_vector(lat1, lon1), unit_vector(lat2, lon2))
}

/// Result of a bilinear interpolation query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interp {
    /// Interpolated value.
    pub value: f64,
    /// True when the query latitude lay poleward of the outermost row
    /// centers and was clamped onto that row.
    pub clamped: bool,
}

/// Bilinear interpolation of a gridded scalar field at (lat, lon) degrees.
///
/// Longitude wraps periodically; latitudes poleward of the outermost row
/// centers are clamped onto that row and flagged. `values` is row-major
/// with `grid.n_cells()` entries.
pub fn bilinear_interpolate(
    grid: &LatLonGrid,
    values: &[f64],
    lat: f64,
    lon: f64,
) -> Result<Interp> {
    if values.len() != grid.n_cells() {
        return Err(Error::dims(format!(
            "field has {} values for a grid of {} cells",
            values.len(),
            grid.n_cells()
        )));
    }
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::data(format!("latitude {lat} outside [-90, 90]")));
    }
    let lats = grid.latitudes();
    let n_lat = lats.len();
    let n_lon = grid.n_lon();

    // Longitude bracket with wraparound.
    let dlon = grid.lon_spacing();
    let mut t = (lon - grid.longitudes()[0]) / dlon;
    t = t.rem_euclid(n_lon as f64);
    let j0 = (t.floor() as usize) % n_lon;
    let j1 = (j0 + 1) % n_lon;
    let fx = t - t.floor();

    // Latitude bracket; latitudes are strictly decreasing.
    let (i0, i1, fy, clamped) = if lat >= lats[0] {
        (0, 0, 0.0, lat > lats[0])
    } else if lat <= lats[n_lat - 1] {
        (n_lat - 1, n_lat - 1, 0.0, lat < lats[n_lat - 1])
    } else {
        // First row strictly below the query latitude.
        let hi = lats.partition_point(|&l| l > lat);
        let i0 = hi - 1;
        let fy = (lats[i0] - lat) / (lats[i0] - lats[hi]);
        (i0, hi, fy, false)
    };

    let v00 = values[grid.cell_index(i0, j0)];
    let v01 = values[grid.cell_index(i0, j1)];
    let v10 = values[grid.cell_index(i1, j0)];
    let v11 = values[grid.cell_index(i1, j1)];
    let top = v00 + fx * (v01 - v00);
    let bot = v10 + fx * (v11 - v10);
    Ok(Interp {
        value: top + fy * (bot - top),
        clamped,
    })
}

/// A scalar field bound to its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    /// Grid geometry.
    pub grid: LatLonGrid,
    /// Row-major values, `grid.n_cells()` entries.
    pub values: Vec<f64>,
}

impl GriddedField {
    /// Bind values to a grid, checking length.
    pub fn new(grid: LatLonGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::dims(format!(
                "field has {} values for a grid of {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        Ok(GriddedField { grid, values })
    }

    /// Constant field.
    pub fn constant(grid: LatLonGrid, value: f64) -> Self {
        let n = grid.n_cells();
        GriddedField {
            grid,
            values: vec![value; n],
        }
    }

    /// Bilinear interpolation at (lat, lon) degrees.
    pub fn interpolate(&self, lat: f64, lon: f64) -> Result<Interp> {
        bilinear_interpolate(&self.grid, &self.values, lat, lon)
    }
}
