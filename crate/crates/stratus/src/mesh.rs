//! Icosahedral meshes on the sphere.
//!
//! A level-k mesh is the regular icosahedron subdivided k times: each
//! triangle splits into four by edge midpoints reprojected onto the sphere.
//! Counts follow the closed forms
//!
//! | level | nodes        | edges        | faces      |
//! |-------|--------------|--------------|------------|
//! | k     | 10 * 4^k + 2 | 30 * 4^k     | 20 * 4^k   |
//!
//! Node ordering is deterministic: parent nodes first, then the midpoints
//! in the lexicographic order of the parent edges they split. Every node
//! carries the exact area of its spherical Voronoi cell, computed from the
//! circumcenters of its incident triangles.

use crate::error::{Error, Result};
use crate::grid::central_angle;
use crate::EARTH_RADIUS_KM;
use serde::Serialize;

/// Largest supported refinement level (655,362 nodes).
pub const MAX_REFINEMENT: u8 = 8;

/// A subdivided icosahedron with per-node Voronoi cell areas.
#[derive(Debug, Clone)]
pub struct IcosahedralMesh {
    refinement_level: u8,
    nodes: Vec<[f64; 3]>,
    edges: Vec<(u32, u32)>,
    faces: Vec<[u32; 3]>,
    voronoi_area_km2: Vec<f64>,
}

/// Golden ratio, used by the base icosahedron coordinates.
const PHI: f64 = 1.618_033_988_749_894_8;

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn base_icosahedron() -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    let t = PHI;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let nodes = raw.iter().map(|&v| normalize(v)).collect();
    // Counter-clockwise as seen from outside the sphere.
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (nodes, faces)
}

/// Undirected edges of a face list, deduplicated and lexicographically
/// sorted as (min, max) pairs.
fn edges_of(faces: &[[u32; 3]]) -> Vec<(u32, u32)> {
    let mut edges: Vec<(u32, u32)> = faces
        .iter()
        .flat_map(|f| {
            [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
                .into_iter()
                .map(|(a, b)| (a.min(b), a.max(b)))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

impl IcosahedralMesh {
    /// Build the level-k mesh by k midpoint subdivisions of the icosahedron.
    pub fn refine(level: u8) -> Result<Self> {
        if level > MAX_REFINEMENT {
            return Err(Error::config(format!(
                "refinement level {level} exceeds maximum {MAX_REFINEMENT}"
            )));
        }
        let (mut nodes, mut faces) = base_icosahedron();
        for _ in 0..level {
            let edges = edges_of(&faces);
            let n_old = nodes.len() as u32;
            // Midpoint nodes, one per parent edge, in edge order.
            let mut midpoint_of = std::collections::HashMap::with_capacity(edges.len());
            for (e, &(a, b)) in edges.iter().enumerate() {
                let pa = nodes[a as usize];
                let pb = nodes[b as usize];
                nodes.push(normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]));
                midpoint_of.insert((a, b), n_old + e as u32);
            }
            let mid = |a: u32, b: u32| midpoint_of[&(a.min(b), a.max(b))];
            let mut next_faces = Vec::with_capacity(faces.len() * 4);
            for &[a, b, c] in &faces {
                let (mab, mbc, mca) = (mid(a, b), mid(b, c), mid(c, a));
                next_faces.push([a, mab, mca]);
                next_faces.push([b, mbc, mab]);
                next_faces.push([c, mca, mbc]);
                next_faces.push([mab, mbc, mca]);
            }
            faces = next_faces;
        }
        let edges = edges_of(&faces);
        let voronoi_area_km2 = voronoi_areas_km2(&nodes, &faces)?;
        Ok(IcosahedralMesh {
            refinement_level: level,
            nodes,
            edges,
            faces,
            voronoi_area_km2,
        })
    }

    /// Refinement level k.
    pub fn refinement_level(&self) -> u8 {
        self.refinement_level
    }

    /// Node unit vectors.
    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    /// Number of nodes (10 * 4^k + 2).
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Undirected edges as (min, max) node pairs, lexicographically sorted.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Triangles, counter-clockwise from outside.
    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    /// Spherical Voronoi cell area of each node in square kilometres;
    /// sums to the surface area of the Earth sphere.
    pub fn voronoi_area_km2(&self) -> &[f64] {
        &self.voronoi_area_km2
    }

    /// (latitude, longitude) of a node in degrees, longitude in [0, 360).
    pub fn node_latlon(&self, idx: usize) -> (f64, f64) {
        let p = self.nodes[idx];
        let lat = p[2].asin().to_degrees();
        let lon = p[1].atan2(p[0]).to_degrees().rem_euclid(360.0);
        (lat, lon)
    }

    /// Mean geodesic edge length in kilometres.
    pub fn mean_edge_length_km(&self) -> f64 {
        let total: f64 = self
            .edges
            .iter()
            .map(|&(a, b)| central_angle(self.nodes[a as usize], self.nodes[b as usize]))
            .sum();
        EARTH_RADIUS_KM * total / self.edges.len() as f64
    }

    /// Node adjacency lists derived from the edge list.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        adj
    }

    /// All nodes within `hops` edge steps of `node` (including the node
    /// itself), ascending.
    pub fn khop_neighborhood(&self, node: u32, hops: u32) -> Result<Vec<u32>> {
        if node as usize >= self.nodes.len() {
            return Err(Error::data(format!(
                "node {node} out of range for mesh with {} nodes",
                self.nodes.len()
            )));
        }
        let adj = self.adjacency();
        let mut dist = vec![u32::MAX; self.nodes.len()];
        let mut queue = std::collections::VecDeque::new();
        dist[node as usize] = 0;
        queue.push_back(node);
        while let Some(v) = queue.pop_front() {
            if dist[v as usize] == hops {
                continue;
            }
            for &w in &adj[v as usize] {
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = dist[v as usize] + 1;
                    queue.push_back(w);
                }
            }
        }
        let mut out: Vec<u32> = (0..self.nodes.len() as u32)
            .filter(|&v| dist[v as usize] <= hops)
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Serialize nodes, edges and Voronoi areas as a JSON document.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct MeshExport<'a> {
            refinement_level: u8,
            n_nodes: usize,
            nodes_xyz: &'a [[f64; 3]],
            nodes_latlon: Vec<[f64; 2]>,
            edges: &'a [(u32, u32)],
            voronoi_area_km2: &'a [f64],
        }
        let latlon = (0..self.n_nodes())
            .map(|i| {
                let (lat, lon) = self.node_latlon(i);
                [lat, lon]
            })
            .collect();
        serde_json::to_string(&MeshExport {
            refinement_level: self.refinement_level,
            n_nodes: self.n_nodes(),
            nodes_xyz: &self.nodes,
            nodes_latlon: latlon,
            edges: &self.edges,
            voronoi_area_km2: &self.voronoi_area_km2,
        })
        .expect("mesh export cannot fail")
    }
}

/// Circumcenter of a spherical triangle, on the same side as its vertices.
fn circumcenter(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let mut n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let centroid = [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]];
    if n[0] * centroid[0] + n[1] * centroid[1] + n[2] * centroid[2] < 0.0 {
        n = [-n[0], -n[1], -n[2]];
    }
    normalize(n)
}

/// Signed spherical excess of the triangle (a, b, c).
fn triangle_excess(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0]);
    let dots = 1.0 + (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
        + (b[0] * c[0] + b[1] * c[1] + b[2] * c[2])
        + (c[0] * a[0] + c[1] * a[1] + c[2] * a[2]);
    2.0 * det.atan2(dots)
}

/// Exact spherical Voronoi cell areas for the nodes of a triangulation.
///
/// The Voronoi cell of a node is the spherical polygon whose vertices are
/// the circumcenters of the incident triangles, walked in order around the
/// node; its area is the sum of the signed excesses of a triangle fan.
fn voronoi_areas_km2(nodes: &[[f64; 3]], faces: &[[u32; 3]]) -> Result<Vec<f64>> {
    let n = nodes.len();
    // For each node, the incident faces keyed by the neighbor that follows
    // the node in CCW order; walking successor edges orders the fan.
    let mut fan_next: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n]; // (start_neighbor, end_neighbor)
    let mut centers: Vec<Vec<(u32, [f64; 3])>> = vec![Vec::new(); n]; // keyed by start_neighbor
    for &[a, b, c] in faces {
        let cc = circumcenter(nodes[a as usize], nodes[b as usize], nodes[c as usize]);
        for (v, s, e) in [(a, b, c), (b, c, a), (c, a, b)] {
            fan_next[v as usize].push((s, e));
            centers[v as usize].push((s, cc));
        }
    }
    let mut areas = Vec::with_capacity(n);
    for v in 0..n {
        let ring = &fan_next[v];
        let m = ring.len();
        if m < 3 {
            return Err(Error::data(format!(
                "node {v} has only {m} incident faces; not a closed triangulation"
            )));
        }
        // Walk the fan: the face starting at `s` ends at `e`; the next face
        // starts at `e`.
        let center_of = |s: u32| -> [f64; 3] {
            centers[v]
                .iter()
                .find(|&&(k, _)| k == s)
                .map(|&(_, c)| c)
                .expect("fan walk hit a missing face; triangulation not closed")
        };
        let mut order = Vec::with_capacity(m);
        let (mut s, _) = ring[0];
        for _ in 0..m {
            order.push(center_of(s));
            let &(_, e) = ring
                .iter()
                .find(|&&(k, _)| k == s)
                .expect("open fan around node");
            s = e;
        }
        let mut excess = 0.0;
        for i in 1..m - 1 {
            excess += triangle_excess(order[0], order[i], order[i + 1]);
        }
        areas.push(excess.abs() * EARTH_RADIUS_KM * EARTH_RADIUS_KM);
    }
    Ok(areas)
}
