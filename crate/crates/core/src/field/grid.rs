//! Static tetrahedral lattice over [-1,1]^3 and the per-vertex field
//! parameters that live on it.

use std::collections::HashMap;

use nalgebra::Matrix3;

use crate::{Error, Result, Vec3};

/// Tetrahedralized lattice: `resolution` cube cells per axis, each split
/// into the six Kuhn tetrahedra around the cell's main diagonal. All cells
/// use the same split, so shared faces carry matching diagonals and the
/// lattice is conforming. Vertex positions are immutable after construction.
#[derive(Debug, Clone)]
pub struct TetGrid {
    pub resolution: usize,
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[u32; 4]>,
    /// Canonical (min-index, max-index) pairs covering the union of tet
    /// edges, sorted, with no duplicates.
    pub edges: Vec<(u32, u32)>,
    edge_index: HashMap<(u32, u32), u32>,
    spacing: f64,
}

/// Corner-path chains of the Kuhn split: six monotone paths from corner
/// 000 to corner 111 (corner code bit0=x, bit1=y, bit2=z).
const KUHN_CHAINS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

impl TetGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Scene("grid resolution must be >= 1".into()));
        }
        let n = resolution + 1;
        let spacing = 2.0 / resolution as f64;
        let mut vertices = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    vertices.push(Vec3::new(
                        -1.0 + spacing * i as f64,
                        -1.0 + spacing * j as f64,
                        -1.0 + spacing * k as f64,
                    ));
                }
            }
        }
        let vid = |i: usize, j: usize, k: usize| -> u32 { ((k * n + j) * n + i) as u32 };

        let mut tets = Vec::with_capacity(resolution * resolution * resolution * 6);
        for k in 0..resolution {
            for j in 0..resolution {
                for i in 0..resolution {
                    let corner = |code: usize| -> u32 {
                        vid(i + (code & 1), j + ((code >> 1) & 1), k + ((code >> 2) & 1))
                    };
                    for chain in &KUHN_CHAINS {
                        let mut tet = [
                            corner(chain[0]),
                            corner(chain[1]),
                            corner(chain[2]),
                            corner(chain[3]),
                        ];
                        if signed_volume(
                            vertices[tet[0] as usize],
                            vertices[tet[1] as usize],
                            vertices[tet[2] as usize],
                            vertices[tet[3] as usize],
                        ) < 0.0
                        {
                            tet.swap(2, 3);
                        }
                        tets.push(tet);
                    }
                }
            }
        }

        let mut edge_set = std::collections::BTreeSet::new();
        for tet in &tets {
            for (a, b) in tet_edge_pairs(tet) {
                edge_set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<(u32, u32)> = edge_set.into_iter().collect();
        let edge_index = edges
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i as u32))
            .collect();

        Ok(TetGrid {
            resolution,
            vertices,
            tets,
            edges,
            edge_index,
            spacing,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn edge_id(&self, a: u32, b: u32) -> Option<u32> {
        self.edge_index.get(&(a.min(b), a.max(b))).copied()
    }

    /// True when the vertex lies on the boundary of the box.
    pub fn is_boundary_vertex(&self, index: usize) -> bool {
        let n = self.resolution + 1;
        let i = index % n;
        let j = (index / n) % n;
        let k = index / (n * n);
        i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1
    }

    fn cell_of(&self, p: Vec3) -> (usize, usize, usize) {
        let r = self.resolution as f64;
        let f = |x: f64| -> usize {
            let c = ((x + 1.0) / self.spacing).floor();
            (c.max(0.0) as usize).min(self.resolution - 1)
        };
        let _ = r;
        (f(p.x), f(p.y), f(p.z))
    }

    fn cell_tet_range(&self, i: usize, j: usize, k: usize) -> std::ops::Range<usize> {
        let cell = (k * self.resolution + j) * self.resolution + i;
        cell * 6..cell * 6 + 6
    }
}

pub fn tet_edge_pairs(tet: &[u32; 4]) -> [(u32, u32); 6] {
    [
        (tet[0], tet[1]),
        (tet[0], tet[2]),
        (tet[0], tet[3]),
        (tet[1], tet[2]),
        (tet[1], tet[3]),
        (tet[2], tet[3]),
    ]
}

pub fn signed_volume(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

/// Per-vertex SDF values and deformation offsets: the geometry
/// optimization target.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub sdf: Vec<f64>,
    pub offset: Vec<Vec3>,
}

impl FieldParams {
    pub fn constant(grid: &TetGrid, sdf_value: f64) -> Self {
        FieldParams {
            sdf: vec![sdf_value; grid.vertex_count()],
            offset: vec![Vec3::zeros(); grid.vertex_count()],
        }
    }

    /// Direct oracle sampling: sdf per vertex from `f`, offsets zero.
    pub fn from_fn(grid: &TetGrid, mut f: impl FnMut(Vec3) -> f64) -> Self {
        FieldParams {
            sdf: grid.vertices.iter().map(|&v| f(v)).collect(),
            offset: vec![Vec3::zeros(); grid.vertex_count()],
        }
    }

    /// Clamp offsets to the cap and pin boundary vertices in place so the
    /// deformed lattice always covers the full box.
    pub fn project_offsets(&mut self, grid: &TetGrid, cap: f64) {
        for (i, off) in self.offset.iter_mut().enumerate() {
            if grid.is_boundary_vertex(i) {
                *off = Vec3::zeros();
                continue;
            }
            let n = off.norm();
            if n > cap {
                *off *= cap / n;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.sdf.iter().all(|s| s.is_finite())
            && self.offset.iter().all(|o| o.x.is_finite() && o.y.is_finite() && o.z.is_finite())
    }
}

/// Default offset cap as a fraction of grid spacing.
pub const OFFSET_CAP_FACTOR: f64 = 0.45;

/// Returns the stored per-vertex scalar and offset.
pub fn field_eval(grid: &TetGrid, params: &FieldParams, index: usize) -> Result<(f64, Vec3)> {
    if index >= grid.vertex_count() {
        return Err(Error::IndexOutOfRange {
            index,
            len: grid.vertex_count(),
        });
    }
    let _ = grid;
    Ok((params.sdf[index], params.offset[index]))
}

/// Grid with offsets applied; owns the deformed vertex positions and
/// answers point-location queries against them.
pub struct DeformedGrid<'a> {
    pub grid: &'a TetGrid,
    pub positions: Vec<Vec3>,
}

/// Result of locating a point: containing tet, barycentric weights over
/// its four corners, and the interpolant's spatial gradient.
#[derive(Debug, Clone, Copy)]
pub struct PointInTet {
    pub tet: usize,
    pub weights: [f64; 4],
}

const BARY_TOL: f64 = 1e-9;

impl<'a> DeformedGrid<'a> {
    pub fn new(grid: &'a TetGrid, params: &FieldParams) -> Self {
        let positions = grid
            .vertices
            .iter()
            .zip(&params.offset)
            .map(|(v, o)| v + o)
            .collect();
        DeformedGrid { grid, positions }
    }

    /// Barycentric weights of `p` in tet `t`, or None when outside.
    fn weights_in(&self, t: usize, p: Vec3) -> Option<[f64; 4]> {
        let tet = &self.grid.tets[t];
        let q0 = self.positions[tet[0] as usize];
        let q1 = self.positions[tet[1] as usize];
        let q2 = self.positions[tet[2] as usize];
        let q3 = self.positions[tet[3] as usize];
        let m = Matrix3::from_columns(&[q1 - q0, q2 - q0, q3 - q0]);
        let inv = m.try_inverse()?;
        let w = inv * (p - q0);
        let w0 = 1.0 - w.x - w.y - w.z;
        if w0 >= -BARY_TOL && w.x >= -BARY_TOL && w.y >= -BARY_TOL && w.z >= -BARY_TOL {
            Some([w0, w.x, w.y, w.z])
        } else {
            None
        }
    }

    /// Locate the tet containing `p`. The candidate cell from the
    /// undeformed lattice is checked first, then its 26-neighborhood in
    /// ascending cell order; with offsets capped below half a cell the
    /// true container is always within that shell. First hit wins, so the
    /// result is deterministic even where deformed tets overlap.
    pub fn locate(&self, p: Vec3) -> Option<PointInTet> {
        let r = self.grid.resolution;
        let (ci, cj, ck) = self.grid.cell_of(p);
        for t in self.grid.cell_tet_range(ci, cj, ck) {
            if let Some(weights) = self.weights_in(t, p) {
                return Some(PointInTet { tet: t, weights });
            }
        }
        let lo = |c: usize| c.saturating_sub(1);
        let hi = |c: usize| (c + 1).min(r - 1);
        for k in lo(ck)..=hi(ck) {
            for j in lo(cj)..=hi(cj) {
                for i in lo(ci)..=hi(ci) {
                    if (i, j, k) == (ci, cj, ck) {
                        continue;
                    }
                    for t in self.grid.cell_tet_range(i, j, k) {
                        if let Some(weights) = self.weights_in(t, p) {
                            return Some(PointInTet { tet: t, weights });
                        }
                    }
                }
            }
        }
        None
    }

    /// Interpolated field value at a located point.
    pub fn interpolate(&self, params: &FieldParams, hit: &PointInTet) -> f64 {
        let tet = &self.grid.tets[hit.tet];
        (0..4)
            .map(|i| hit.weights[i] * params.sdf[tet[i] as usize])
            .sum()
    }

    /// Spatial gradient of the linear interpolant inside the tet.
    pub fn interpolant_gradient(&self, params: &FieldParams, hit: &PointInTet) -> Vec3 {
        let tet = &self.grid.tets[hit.tet];
        let q0 = self.positions[tet[0] as usize];
        let m = Matrix3::from_columns(&[
            self.positions[tet[1] as usize] - q0,
            self.positions[tet[2] as usize] - q0,
            self.positions[tet[3] as usize] - q0,
        ]);
        let s0 = params.sdf[tet[0] as usize];
        let ds = Vec3::new(
            params.sdf[tet[1] as usize] - s0,
            params.sdf[tet[2] as usize] - s0,
            params.sdf[tet[3] as usize] - s0,
        );
        match m.transpose().try_inverse() {
            Some(minv_t) => minv_t * ds,
            None => Vec3::zeros(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_and_spacing() {
        let g = TetGrid::new(4).unwrap();
        assert_eq!(g.vertex_count(), 125);
        assert_eq!(g.tets.len(), 4 * 4 * 4 * 6);
        assert!((g.spacing() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_tets_positively_oriented() {
        let g = TetGrid::new(3).unwrap();
        for tet in &g.tets {
            let vol = signed_volume(
                g.vertices[tet[0] as usize],
                g.vertices[tet[1] as usize],
                g.vertices[tet[2] as usize],
                g.vertices[tet[3] as usize],
            );
            assert!(vol > 0.0, "tet {tet:?} has signed volume {vol}");
        }
    }

    #[test]
    fn tets_tile_each_cell_exactly() {
        let g = TetGrid::new(2).unwrap();
        let cell_volume = g.spacing().powi(3);
        for cell in 0..8 {
            let total: f64 = (cell * 6..cell * 6 + 6)
                .map(|t| {
                    let tet = &g.tets[t];
                    signed_volume(
                        g.vertices[tet[0] as usize],
                        g.vertices[tet[1] as usize],
                        g.vertices[tet[2] as usize],
                        g.vertices[tet[3] as usize],
                    )
                })
                .sum();
            assert!((total - cell_volume).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_table_covers_tet_edges_without_duplicates() {
        let g = TetGrid::new(3).unwrap();
        let mut expected = std::collections::BTreeSet::new();
        for tet in &g.tets {
            for (a, b) in tet_edge_pairs(tet) {
                expected.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(g.edges.len(), expected.len());
        for e in &g.edges {
            assert!(expected.contains(e));
            assert!(g.edge_id(e.0, e.1).is_some());
            assert!(g.edge_id(e.1, e.0).is_some());
        }
    }

    #[test]
    fn field_eval_returns_stored_values() {
        let g = TetGrid::new(2).unwrap();
        let mut p = FieldParams::constant(&g, 0.3);
        p.offset[5] = Vec3::new(0.01, 0.0, 0.0);
        let (s, d) = field_eval(&g, &p, 5).unwrap();
        assert_eq!(s, 0.3);
        assert_eq!(d, Vec3::new(0.01, 0.0, 0.0));
        assert!(matches!(
            field_eval(&g, &p, 10_000),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn locate_and_interpolate_linear_field() {
        let g = TetGrid::new(4).unwrap();
        // s(p) = 2x - y + 0.5z + 0.25 sampled at vertices reproduces
        // exactly under barycentric interpolation.
        let params = FieldParams::from_fn(&g, |v| 2.0 * v.x - v.y + 0.5 * v.z + 0.25);
        let dg = DeformedGrid::new(&g, &params);
        for p in [
            Vec3::new(0.13, -0.4, 0.77),
            Vec3::new(-0.99, 0.99, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 1.0),
        ] {
            let hit = dg.locate(p).expect("inside box");
            let s = dg.interpolate(&params, &hit);
            let expect = 2.0 * p.x - p.y + 0.5 * p.z + 0.25;
            assert!((s - expect).abs() < 1e-12, "at {p:?}: {s} vs {expect}");
            let grad = dg.interpolant_gradient(&params, &hit);
            assert!((grad - Vec3::new(2.0, -1.0, 0.5)).norm() < 1e-9);
        }
    }

    #[test]
    fn locate_follows_deformed_positions() {
        let g = TetGrid::new(4).unwrap();
        let mut params = FieldParams::constant(&g, 1.0);
        let cap = OFFSET_CAP_FACTOR * g.spacing();
        // push an interior vertex and make sure points near it still locate
        for (i, v) in g.vertices.iter().enumerate() {
            if !g.is_boundary_vertex(i) {
                let _ = v;
                params.offset[i] = Vec3::new(cap * 0.9, 0.0, 0.0);
            }
        }
        params.project_offsets(&g, cap);
        let dg = DeformedGrid::new(&g, &params);
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..500 {
            let p = Vec3::new(next(), next(), next());
            assert!(dg.locate(p).is_some(), "lost point {p:?}");
        }
    }

    #[test]
    fn boundary_offsets_are_pinned() {
        let g = TetGrid::new(2).unwrap();
        let mut params = FieldParams::constant(&g, 0.0);
        for o in &mut params.offset {
            *o = Vec3::new(10.0, 0.0, 0.0);
        }
        params.project_offsets(&g, 0.1);
        for (i, o) in params.offset.iter().enumerate() {
            if g.is_boundary_vertex(i) {
                assert_eq!(*o, Vec3::zeros());
            } else {
                assert!((o.norm() - 0.1).abs() < 1e-12);
            }
        }
    }
}
