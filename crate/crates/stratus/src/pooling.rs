//! Neighborhood (fuzzy) verification: pooling fields over geodesic regions
//! centered on icosahedral mesh nodes, then scoring the pooled quantities.
//!
//! Each mesh refinement level yields one set of overlapping circular
//! regions whose radius is the mean distance between neighboring mesh
//! nodes, so the region diameter roughly halves per level.

use crate::error::{Error, Result};
use crate::grid::{geodesic_distance_km, AreaWeights, LatLonGrid};
use crate::mesh::IcosahedralMesh;
use crate::metrics::{crps, EnsembleBatch, TargetBatch};
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

/// One pooling region: a spherical cap of grid cells around a mesh node.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRegion {
    /// Index of the generating mesh node.
    pub center_node: u32,
    /// Latitude of the center in degrees.
    pub center_lat: f64,
    /// Longitude of the center in degrees.
    pub center_lon: f64,
    /// Grid cells inside the cap (flat indices, ascending).
    pub cells: Vec<u32>,
    /// Solid angle of each member cell (same order as `cells`).
    pub cell_weights: Vec<f64>,
    /// Voronoi weight of the center node, renormalized to unit mean over
    /// the region set.
    pub region_weight: f64,
}

/// All pooling regions for one (grid, refinement level) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRegionSet {
    /// Mesh refinement level that generated the centers.
    pub level: u32,
    /// Geodesic membership radius: mean inter-node distance of the mesh.
    pub radius_km: f64,
    /// Number of cells of the grid the regions index into.
    pub n_grid_cells: usize,
    /// The regions, one per mesh node.
    pub regions: Vec<PoolRegion>,
}

/// How to reduce a field over a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Area-weighted mean over member cells.
    Average,
    /// Maximum over member cells.
    Max,
}

/// Build pooling regions from the level-`k` icosahedral mesh: one region
/// per node, radius = mean edge length, membership by geodesic distance
/// (boundary inclusive).
pub fn build_pool_regions(grid: &LatLonGrid, level: u32) -> Result<PoolRegionSet> {
    if !(2..=7).contains(&level) {
        return Err(Error::config(format!(
            "pooling level must be in 2..=7, got {level}"
        )));
    }
    let mesh = IcosahedralMesh::refine(level as u8)?;
    let radius_km = mesh.mean_edge_length_km();
    let radius_rad = radius_km / crate::EARTH_RADIUS_KM;

    let n_lat = grid.n_lat();
    let n_lon = grid.n_lon();
    let lats = grid.latitudes().to_vec();
    let lons = grid.longitudes().to_vec();
    let row_angles = grid.row_solid_angles();

    // Voronoi weights of the centers, renormalized to unit mean.
    let areas = mesh.voronoi_area_km2();
    let mean_area = areas.iter().sum::<f64>() / areas.len() as f64;

    let mut regions = Vec::with_capacity(mesh.n_nodes());
    for node in 0..mesh.n_nodes() {
        let (clat, clon) = mesh.node_latlon(node);
        let (sin_c, cos_c) = clat.to_radians().sin_cos();
        let cos_r = radius_rad.cos();
        let mut cells = Vec::new();
        let mut cell_weights = Vec::new();
        for (row, &lat) in lats.iter().enumerate() {
            // Row pre-filter: nearest point of the row is at dlon = 0.
            let (sin_p, cos_p) = lat.to_radians().sin_cos();
            let a = sin_c * sin_p;
            let b = cos_c * cos_p;
            // Small slack so the exact predicate below makes every
            // boundary call.
            if a + b < cos_r - 1e-12 {
                continue;
            }
            // Column window: |dlon| <= dl_max reaches distance <= radius.
            let take_all = b <= 1e-15 || (cos_r - a) / b <= -1.0;
            let dl_max = if take_all {
                std::f64::consts::PI
            } else {
                let t = ((cos_r - a) / b).clamp(-1.0, 1.0);
                t.acos() + 1e-9 // slack; exact test decides
            };
            let dl_max_deg = dl_max.to_degrees();
            for (col, &lon) in lons.iter().enumerate() {
                let mut dlon = (lon - clon).rem_euclid(360.0);
                if dlon > 180.0 {
                    dlon -= 360.0;
                }
                if dlon.abs() > dl_max_deg {
                    continue;
                }
                if geodesic_distance_km(lat, lon, clat, clon) <= radius_km {
                    cells.push((row * n_lon + col) as u32);
                    cell_weights.push(row_angles[row]);
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::data(format!(
                "pooling region around node {node} at level {level} contains no grid \
                 cell; grid too coarse for radius {radius_km:.1} km"
            )));
        }
        regions.push(PoolRegion {
            center_node: node as u32,
            center_lat: clat,
            center_lon: clon,
            cells,
            cell_weights,
            region_weight: areas[node] / mean_area,
        });
    }
    Ok(PoolRegionSet {
        level,
        radius_km,
        n_grid_cells: n_lat * n_lon,
        regions,
    })
}

impl PoolRegionSet {
    /// Number of regions.
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    /// Region weights as metric weights (unit mean).
    pub fn region_weights(&self) -> Result<AreaWeights> {
        let w: Vec<f64> = self.regions.iter().map(|r| r.region_weight).collect();
        AreaWeights::from_cell_weights(&w)
    }

    fn check_field(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.n_grid_cells {
            return Err(Error::dims(format!(
                "field has {} cells, pooling regions index {}",
                field.len(),
                self.n_grid_cells
            )));
        }
        Ok(())
    }

    /// Reduce a grid field to one value per region.
    pub fn pool(&self, field: &[f64], mode: PoolMode) -> Result<Vec<f64>> {
        self.check_field(field)?;
        let out = self
            .regions
            .iter()
            .map(|r| match mode {
                PoolMode::Average => {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (&c, &w) in r.cells.iter().zip(&r.cell_weights) {
                        num += w * field[c as usize];
                        den += w;
                    }
                    num / den
                }
                PoolMode::Max => r
                    .cells
                    .iter()
                    .map(|&c| field[c as usize])
                    .fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        Ok(out)
    }
}

/// Area-weighted mean of the field over each region.
pub fn pool_average(field: &[f64], regions: &PoolRegionSet) -> Result<Vec<f64>> {
    regions.pool(field, PoolMode::Average)
}

/// Maximum of the field over each region.
pub fn pool_max(field: &[f64], regions: &PoolRegionSet) -> Result<Vec<f64>> {
    regions.pool(field, PoolMode::Max)
}

/// Pool every member and the target, then CRPS over regions with the
/// Voronoi region weights standing in for cell areas.
pub fn pooled_crps(
    ens: &EnsembleBatch,
    tgt: &TargetBatch,
    regions: &PoolRegionSet,
    mode: PoolMode,
) -> Result<f64> {
    if ens.n_cells() != regions.n_grid_cells {
        return Err(Error::dims(format!(
            "forecast has {} cells, pooling regions index {}",
            ens.n_cells(),
            regions.n_grid_cells
        )));
    }
    if tgt.n_cells() != regions.n_grid_cells {
        return Err(Error::dims(format!(
            "target has {} cells, pooling regions index {}",
            tgt.n_cells(),
            regions.n_grid_cells
        )));
    }
    let n_regions = regions.n_regions();
    let mut ens_pooled =
        Vec::with_capacity(ens.n_members() * ens.n_inits() * n_regions);
    for m in 0..ens.n_members() {
        for k in 0..ens.n_inits() {
            ens_pooled.extend(regions.pool(ens.member_field(m, k), mode)?);
        }
    }
    let mut tgt_pooled = Vec::with_capacity(tgt.n_inits() * n_regions);
    for k in 0..tgt.n_inits() {
        tgt_pooled.extend(regions.pool(tgt.field(k), mode)?);
    }
    let ens_p = EnsembleBatch::new(
        ens.meta.clone(),
        ens.n_members(),
        ens.n_inits(),
        n_regions,
        ens_pooled,
        ens.init_mask().to_vec(),
    )?;
    let tgt_p = TargetBatch::new(
        tgt.meta.clone(),
        tgt.n_inits(),
        n_regions,
        tgt_pooled,
        tgt.init_mask().to_vec(),
    )?;
    crps(&ens_p, &tgt_p, &regions.region_weights()?)
}

const CACHE_MAGIC: &[u8; 8] = b"POOLRGN1";

impl PoolRegionSet {
    /// Serialize to a little-endian binary cache file.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = BufWriter::new(f);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&self.level.to_le_bytes())?;
        w.write_all(&self.radius_km.to_le_bytes())?;
        w.write_all(&(self.n_grid_cells as u64).to_le_bytes())?;
        w.write_all(&(self.regions.len() as u64).to_le_bytes())?;
        for r in &self.regions {
            w.write_all(&r.center_node.to_le_bytes())?;
            w.write_all(&r.center_lat.to_le_bytes())?;
            w.write_all(&r.center_lon.to_le_bytes())?;
            w.write_all(&r.region_weight.to_le_bytes())?;
            w.write_all(&(r.cells.len() as u64).to_le_bytes())?;
            for &c in &r.cells {
                w.write_all(&c.to_le_bytes())?;
            }
            for &cw in &r.cell_weights {
                w.write_all(&cw.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Deserialize from [`Self::write_cache`] output.
    pub fn read_cache(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut r = BufReader::new(f);
        fn read_exact<const N: usize>(r: &mut impl IoRead) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("truncated pooling cache: {e}")))?;
            Ok(buf)
        }
        let magic: [u8; 8] = read_exact(&mut r)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a pooling cache file".into()));
        }
        let level = u32::from_le_bytes(read_exact(&mut r)?);
        let radius_km = f64::from_le_bytes(read_exact(&mut r)?);
        let n_grid_cells = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let n_regions = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut regions = Vec::with_capacity(n_regions);
        for _ in 0..n_regions {
            let center_node = u32::from_le_bytes(read_exact(&mut r)?);
            let center_lat = f64::from_le_bytes(read_exact(&mut r)?);
            let center_lon = f64::from_le_bytes(read_exact(&mut r)?);
            let region_weight = f64::from_le_bytes(read_exact(&mut r)?);
            let n_cells = u64::from_le_bytes(read_exact(&mut r)?) as usize;
            let mut cells = Vec::with_capacity(n_cells);
            for _ in 0..n_cells {
                cells.push(u32::from_le_bytes(read_exact(&mut r)?));
            }
            let mut cell_weights = Vec::with_capacity(n_cells);
            for _ in 0..n_cells {
                cell_weights.push(f64::from_le_bytes(read_exact(&mut r)?));
            }
            regions.push(PoolRegion {
                center_node,
                center_lat,
                center_lon,
                cells,
                cell_weights,
                region_weight,
            });
        }
        Ok(PoolRegionSet {
            level,
            radius_km,
            n_grid_cells,
            regions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BatchMeta;
    use rand::Rng;

    fn coarse_grid() -> LatLonGrid {
        // 2 degree cell-centered grid: 90 x 180.
        LatLonGrid::cell_centered(90, 180).unwrap()
    }

    fn meta() -> BatchMeta {
        BatchMeta {
            variable: "tp".into(),
            level_hpa: None,
            lead_time_h: 24,
        }
    }

    /// Brute-force membership: full distance scan, same final predicate.
    fn brute_force_cells(grid: &LatLonGrid, clat: f64, clon: f64, radius_km: f64) -> Vec<u32> {
        let mut out = Vec::new();
        for row in 0..grid.n_lat() {
            for col in 0..grid.n_lon() {
                let (lat, lon) = grid.cell_center(row * grid.n_lon() + col);
                if geodesic_distance_km(lat, lon, clat, clon) <= radius_km {
                    out.push((row * grid.n_lon() + col) as u32);
                }
            }
        }
        out
    }

    #[test]
    fn membership_matches_brute_force_scan_at_k3() {
        let grid = coarse_grid();
        let set = build_pool_regions(&grid, 3).unwrap();
        for r in &set.regions {
            let want = brute_force_cells(&grid, r.center_lat, r.center_lon, set.radius_km);
            assert_eq!(r.cells, want, "node {}", r.center_node);
        }
    }

    #[test]
    fn region_diameters_match_documented_sizes() {
        let grid = coarse_grid();
        let documented = [
            (7u32, 120.0),
            (6, 241.0),
            (5, 481.0),
            (4, 962.0),
            (3, 1922.0),
            (2, 3828.0),
        ];
        for (k, size_km) in documented {
            let mesh = IcosahedralMesh::refine(k as u8).unwrap();
            let diameter = 2.0 * mesh.mean_edge_length_km();
            assert!(
                (diameter - size_km).abs() / size_km < 0.10,
                "level {k}: diameter {diameter} vs {size_km}"
            );
        }
        // Level out of range rejected.
        assert!(build_pool_regions(&grid, 1).is_err());
        assert!(build_pool_regions(&grid, 8).is_err());
    }

    #[test]
    fn every_grid_cell_is_covered_at_k2() {
        let grid = coarse_grid();
        let set = build_pool_regions(&grid, 2).unwrap();
        let mut covered = vec![false; set.n_grid_cells];
        for r in &set.regions {
            for &c in &r.cells {
                covered[c as usize] = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "uncovered cells at level 2");
    }

    #[test]
    fn pooling_constant_linearity_and_max_bound() {
        let grid = coarse_grid();
        let set = build_pool_regions(&grid, 3).unwrap();
        let n = set.n_grid_cells;
        let c = 3.25;
        let constant = vec![c; n];
        for v in pool_average(&constant, &set).unwrap() {
            assert!((v - c).abs() < 1e-12);
        }
        for v in pool_max(&constant, &set).unwrap() {
            assert_eq!(v, c);
        }
        let mut rng = crate::rng::substream(3, &[0]);
        for _ in 0..20 {
            let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let alpha = 2.0;
            let combo: Vec<f64> = f.iter().zip(&g).map(|(&a, &b)| alpha * a + b).collect();
            let pf = pool_average(&f, &set).unwrap();
            let pg = pool_average(&g, &set).unwrap();
            let pc = pool_average(&combo, &set).unwrap();
            for i in 0..pf.len() {
                assert!((pc[i] - (alpha * pf[i] + pg[i])).abs() < 1e-10);
            }
            let pm = pool_max(&f, &set).unwrap();
            for i in 0..pf.len() {
                assert!(pm[i] >= pf[i] - 1e-12, "max < avg in region {i}");
            }
        }
    }

    #[test]
    fn average_matches_brute_force_recomputation() {
        let grid = coarse_grid();
        let set = build_pool_regions(&grid, 3).unwrap();
        let mut rng = crate::rng::substream(3, &[1]);
        let field: Vec<f64> = (0..set.n_grid_cells).map(|_| rng.random::<f64>()).collect();
        let angles = grid.row_solid_angles();
        let got = pool_average(&field, &set).unwrap();
        for (r, &v) in set.regions.iter().zip(&got) {
            let mut num = 0.0;
            let mut den = 0.0;
            for &c in &r.cells {
                let row = c as usize / grid.n_lon();
                num += angles[row] * field[c as usize];
                den += angles[row];
            }
            assert!((v - num / den).abs() < 1e-14);
        }
    }

    #[test]
    fn spike_appears_exactly_in_containing_regions() {
        let grid = coarse_grid();
        let set = build_pool_regions(&grid, 3).unwrap();
        let spike_cell = 90 * 37 + 101; // arbitrary
        let mut field = vec![0.0; set.n_grid_cells];
        field[spike_cell] = 7.5;
        let maxes = pool_max(&field, &set).unwrap();
        for (r, &v) in set.regions.iter().zip(&maxes) {
            let contains = r.cells.binary_search(&(spike_cell as u32)).is_ok();
            if contains {
                assert_eq!(v, 7.5);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn degenerate_single_cell_regions_reproduce_unpooled_crps() {
        // Hand-built region set: one region per cell, unit weights.
        let grid = LatLonGrid::cell_centered(6, 12).unwrap();
        let n = grid.n_cells();
        let angles = grid.row_solid_angles();
        let regions: Vec<PoolRegion> = (0..n)
            .map(|c| PoolRegion {
                center_node: c as u32,
                center_lat: 0.0,
                center_lon: 0.0,
                cells: vec![c as u32],
                cell_weights: vec![angles[c / grid.n_lon()]],
                region_weight: angles[c / grid.n_lon()],
            })
            .collect();
        let set = PoolRegionSet {
            level: 0,
            radius_km: 0.0,
            n_grid_cells: n,
            regions,
        };
        let mut rng = crate::rng::substream(3, &[2]);
        let m = 5;
        let vals: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>()).collect();
        let ens = EnsembleBatch::dense(meta(), m, 1, n, vals).unwrap();
        let truth: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let tgt = TargetBatch::dense(meta(), 1, n, truth).unwrap();
        let pooled = pooled_crps(&ens, &tgt, &set, PoolMode::Average).unwrap();
        let unpooled = crps(&ens, &tgt, &grid.area_weights()).unwrap();
        assert!(
            (pooled - unpooled).abs() < 1e-12,
            "{pooled} vs {unpooled}"
        );
    }

    #[test]
    fn pooled_crps_composition_permutation_and_perfect() {
        let grid = coarse_grid();
        let set = build_pool_regions(&grid, 3).unwrap();
        let n = set.n_grid_cells;
        let mut rng = crate::rng::substream(3, &[3]);
        let m = 4;
        let vals: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>()).collect();
        let ens = EnsembleBatch::dense(meta(), m, 1, n, vals.clone()).unwrap();
        let truth: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let tgt = TargetBatch::dense(meta(), 1, n, truth.clone()).unwrap();

        // Composition oracle: pool members/target by hand, then score.
        let got = pooled_crps(&ens, &tgt, &set, PoolMode::Max).unwrap();
        let mut pooled_members = Vec::new();
        for mm in 0..m {
            pooled_members.extend(pool_max(ens.member_field(mm, 0), &set).unwrap());
        }
        let pooled_tgt = pool_max(&truth, &set).unwrap();
        let ens_p =
            EnsembleBatch::dense(meta(), m, 1, set.n_regions(), pooled_members).unwrap();
        let tgt_p = TargetBatch::dense(meta(), 1, set.n_regions(), pooled_tgt).unwrap();
        let want = crps(&ens_p, &tgt_p, &set.region_weights().unwrap()).unwrap();
        assert!((got - want).abs() < 1e-14);

        // Member permutation leaves the score unchanged.
        let mut perm_vals = vec![0.0; m * n];
        let perm = [2usize, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            perm_vals[dst * n..(dst + 1) * n]
                .copy_from_slice(&vals[src * n..(src + 1) * n]);
        }
        let ens_perm = EnsembleBatch::dense(meta(), m, 1, n, perm_vals).unwrap();
        let got_perm = pooled_crps(&ens_perm, &tgt, &set, PoolMode::Max).unwrap();
        assert_eq!(got, got_perm);

        // Perfect ensemble scores zero.
        let perfect = EnsembleBatch::dense(meta(), 2, 1, n, truth.repeat(2)).unwrap();
        assert_eq!(
            pooled_crps(&perfect, &tgt, &set, PoolMode::Average).unwrap(),
            0.0
        );
    }

    #[test]
    fn avg_pooled_crps_of_noise_decreases_with_region_size() {
        // White-noise ensemble vs white-noise truth around a shared
        // constant: averaging over bigger regions cancels more noise.
        let grid = coarse_grid();
        let n = grid.n_cells();
        let mut rng = crate::rng::substream(3, &[4]);
        let m = 3;
        let vals: Vec<f64> = (0..m * n).map(|_| 10.0 + rng.random::<f64>()).collect();
        let ens = EnsembleBatch::dense(meta(), m, 1, n, vals).unwrap();
        let truth: Vec<f64> = (0..n).map(|_| 10.0 + rng.random::<f64>()).collect();
        let tgt = TargetBatch::dense(meta(), 1, n, truth).unwrap();
        let mut prev = f64::INFINITY;
        for k in [5u32, 4, 3, 2] {
            let set = build_pool_regions(&grid, k).unwrap();
            let c = pooled_crps(&ens, &tgt, &set, PoolMode::Average).unwrap();
            assert!(
                c < prev,
                "level {k}: pooled CRPS {c} did not drop below {prev}"
            );
            prev = c;
        }
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let grid = LatLonGrid::cell_centered(30, 60).unwrap();
        let set = build_pool_regions(&grid, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regions.pool");
        set.write_cache(&path).unwrap();
        let back = PoolRegionSet::read_cache(&path).unwrap();
        assert_eq!(set, back);
        // Corrupt magic is rejected.
        std::fs::write(dir.path().join("bad.pool"), b"NOTPOOL!rest").unwrap();
        assert!(PoolRegionSet::read_cache(&dir.path().join("bad.pool")).is_err());
    }
}
