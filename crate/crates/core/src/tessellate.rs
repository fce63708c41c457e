//! Differentiable marching tetrahedra: extracts the zero level set of the
//! deformed field as a triangle mesh and provides exact adjoints of surface
//! vertex positions with respect to sdf values and offsets.
//!
//! Orientation is fixed combinatorially: for each sign pattern the emitted
//! winding is derived from the parity of the corner permutation, so triangle
//! normals always point from the negative (inside) region toward the
//! positive region without consulting geometry. Topology is treated as
//! piecewise constant in the backward pass.

use crate::field::{FieldGrads, FieldParams, TetGrid};
use crate::{Error, Result, Vec3};

/// Values with |s| below this are nudged to +EPS before classification so
/// no grid vertex sits exactly on the surface.
pub const SIGN_EPS: f64 = 1e-12;

#[inline]
pub fn nudge_sdf(s: f64) -> f64 {
    if s.abs() < SIGN_EPS {
        SIGN_EPS
    } else {
        s
    }
}

/// Grid edge and interpolation parameter that produced a surface vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    /// Canonical (min-index, max-index) grid vertex pair.
    pub edge: (u32, u32),
    /// Crossing parameter measured from the min-index endpoint.
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex provenance; empty for meshes not produced by
    /// `marching_tets` (e.g. imported files).
    pub provenance: Vec<Provenance>,
    pub face_normals: Vec<Vec3>,
}

impl SurfaceMesh {
    pub fn empty() -> Self {
        SurfaceMesh {
            vertices: Vec::new(),
            triangles: Vec::new(),
            provenance: Vec::new(),
            face_normals: Vec::new(),
        }
    }

    /// Build from raw vertices/triangles, recomputing face normals.
    pub fn from_parts(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        let face_normals = triangles
            .iter()
            .map(|t| face_normal(vertices[t[0] as usize], vertices[t[1] as usize], vertices[t[2] as usize]))
            .collect();
        SurfaceMesh {
            vertices,
            triangles,
            provenance: Vec::new(),
            face_normals,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

pub fn face_normal(v0: Vec3, v1: Vec3, v2: Vec3) -> Vec3 {
    let c = (v1 - v0).cross(&(v2 - v0));
    let n = c.norm();
    if n > 0.0 {
        c / n
    } else {
        Vec3::zeros()
    }
}

/// Linear zero crossing along a segment with opposite-sign endpoint values.
pub fn edge_interp(p_a: Vec3, p_b: Vec3, s_a: f64, s_b: f64) -> Result<(Vec3, f64)> {
    if s_a.signum() == s_b.signum() || s_a == 0.0 || s_b == 0.0 {
        return Err(Error::Mesh(format!(
            "edge_interp requires opposite signs, got {s_a} and {s_b}"
        )));
    }
    let t = s_a / (s_a - s_b);
    Ok((p_a + (p_b - p_a) * t, t))
}

/// Local tet edges in canonical order; index into this table is the
/// "canonical edge index" used for the quad diagonal choice.
pub const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn local_edge_id(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    TET_EDGES.iter().position(|&e| e == key).expect("valid local edge")
}

/// Triangles emitted for one sign pattern, as triples of local edge ids
/// wound so the normal points from the negative side to the positive side.
pub fn classify_tet(inside: [bool; 4]) -> Vec<[usize; 3]> {
    let neg: Vec<usize> = (0..4).filter(|&i| inside[i]).collect();
    match neg.len() {
        0 | 4 => Vec::new(),
        1 | 3 => {
            let (apex, flip) = if neg.len() == 1 {
                // one inside vertex: outward winding when the permutation
                // (apex, rest ascending) is even
                (neg[0], neg[0] % 2 == 1)
            } else {
                let apex = (0..4).find(|i| !inside[*i]).unwrap();
                (apex, apex % 2 == 0)
            };
            let others: Vec<usize> = (0..4).filter(|&i| i != apex).collect();
            let mut tri = [
                local_edge_id(apex, others[0]),
                local_edge_id(apex, others[1]),
                local_edge_id(apex, others[2]),
            ];
            if flip {
                tri.swap(1, 2);
            }
            vec![tri]
        }
        2 => {
            let (a, b) = (neg[0], neg[1]);
            let pos: Vec<usize> = (0..4).filter(|&i| !inside[i]).collect();
            let (c, d) = (pos[0], pos[1]);
            // boundary cycle of the quad: consecutive crossings share a
            // tet vertex
            let mut cycle = [
                local_edge_id(a, c),
                local_edge_id(a, d),
                local_edge_id(b, d),
                local_edge_id(b, c),
            ];
            if permutation_is_odd([a, b, c, d]) {
                cycle.swap(1, 3);
            }
            // split along the diagonal with the smallest canonical
            // edge-index pair
            let diag_02 = sorted_pair(cycle[0], cycle[2]);
            let diag_13 = sorted_pair(cycle[1], cycle[3]);
            if diag_02 <= diag_13 {
                vec![
                    [cycle[0], cycle[1], cycle[2]],
                    [cycle[0], cycle[2], cycle[3]],
                ]
            } else {
                vec![
                    [cycle[1], cycle[2], cycle[3]],
                    [cycle[1], cycle[3], cycle[0]],
                ]
            }
        }
        _ => unreachable!(),
    }
}

fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn permutation_is_odd(p: [usize; 4]) -> bool {
    let mut inversions = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            if p[i] > p[j] {
                inversions += 1;
            }
        }
    }
    inversions % 2 == 1
}

/// Extract the zero level set of the deformed field. Deterministic: tets
/// are processed in index order and crossing vertices are deduplicated via
/// the canonical grid edge table.
pub fn marching_tets(grid: &TetGrid, params: &FieldParams) -> SurfaceMesh {
    let nudged: Vec<f64> = params.sdf.iter().map(|&s| nudge_sdf(s)).collect();
    let deformed: Vec<Vec3> = grid
        .vertices
        .iter()
        .zip(&params.offset)
        .map(|(v, o)| v + o)
        .collect();

    let mut edge_vertex: Vec<i64> = vec![-1; grid.edges.len()];
    let mut mesh = SurfaceMesh::empty();

    for tet in &grid.tets {
        let inside = [
            nudged[tet[0] as usize] < 0.0,
            nudged[tet[1] as usize] < 0.0,
            nudged[tet[2] as usize] < 0.0,
            nudged[tet[3] as usize] < 0.0,
        ];
        let tris = classify_tet(inside);
        if tris.is_empty() {
            continue;
        }
        let mut surface_vertex = |local_edge: usize| -> u32 {
            let (la, lb) = TET_EDGES[local_edge];
            let (ga, gb) = (tet[la], tet[lb]);
            let (lo, hi) = (ga.min(gb), ga.max(gb));
            let eid = grid.edge_id(lo, hi).expect("tet edge in edge table") as usize;
            if edge_vertex[eid] >= 0 {
                return edge_vertex[eid] as u32;
            }
            let (point, t) = edge_interp(
                deformed[lo as usize],
                deformed[hi as usize],
                nudged[lo as usize],
                nudged[hi as usize],
            )
            .expect("crossing edge has opposite signs");
            let id = mesh.vertices.len() as u32;
            mesh.vertices.push(point);
            mesh.provenance.push(Provenance { edge: (lo, hi), t });
            edge_vertex[eid] = id as i64;
            id
        };
        for tri in tris {
            let t = [
                surface_vertex(tri[0]),
                surface_vertex(tri[1]),
                surface_vertex(tri[2]),
            ];
            mesh.triangles.push(t);
        }
    }

    mesh.face_normals = mesh
        .triangles
        .iter()
        .map(|t| {
            face_normal(
                mesh.vertices[t[0] as usize],
                mesh.vertices[t[1] as usize],
                mesh.vertices[t[2] as usize],
            )
        })
        .collect();
    mesh
}

/// Chain an upstream gradient on surface vertex positions back to sdf
/// values and offsets through the edge crossings, with the sign pattern
/// held constant.
pub fn mt_backward(
    grid: &TetGrid,
    params: &FieldParams,
    mesh: &SurfaceMesh,
    upstream: &[Vec3],
) -> Result<FieldGrads> {
    if mesh.provenance.len() != mesh.vertices.len() {
        return Err(Error::ProvenanceMismatch(format!(
            "mesh has {} vertices but {} provenance records",
            mesh.vertices.len(),
            mesh.provenance.len()
        )));
    }
    if upstream.len() != mesh.vertices.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} entries for {} vertices",
            upstream.len(),
            mesh.vertices.len()
        )));
    }
    let mut grads = FieldGrads::zeros(grid.vertex_count());
    for (vi, prov) in mesh.provenance.iter().enumerate() {
        let (a, b) = prov.edge;
        let (a, b) = (a as usize, b as usize);
        let s_a = nudge_sdf(params.sdf[a]);
        let s_b = nudge_sdf(params.sdf[b]);
        if s_a.signum() == s_b.signum() {
            return Err(Error::ProvenanceMismatch(format!(
                "edge ({a},{b}) no longer crosses the surface"
            )));
        }
        let denom = s_a - s_b;
        let t = s_a / denom;
        if (t - prov.t).abs() > 1e-9 {
            return Err(Error::ProvenanceMismatch(format!(
                "vertex {vi}: stored t {} but params give {t}",
                prov.t
            )));
        }
        let p_a = grid.vertices[a] + params.offset[a];
        let p_b = grid.vertices[b] + params.offset[b];
        let g = upstream[vi];
        // v = p_a + t (p_b - p_a): position path
        grads.offset[a] += g * (1.0 - t);
        grads.offset[b] += g * t;
        // t path: dt/ds_a = -s_b/denom^2, dt/ds_b = s_a/denom^2
        let g_dot_dir = g.dot(&(p_b - p_a));
        grads.sdf[a] += g_dot_dir * (-s_b / (denom * denom));
        grads.sdf[b] += g_dot_dir * (s_a / (denom * denom));
    }
    Ok(grads)
}

/// Watertightness census: every undirected edge must be shared by exactly
/// two triangles with opposite directed orientations.
pub fn watertight_census(mesh: &SurfaceMesh) -> std::result::Result<(), String> {
    use std::collections::HashMap;
    let mut directed: HashMap<(u32, u32), i32> = HashMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let a = t[k];
            let b = t[(k + 1) % 3];
            *directed.entry((a, b)).or_insert(0) += 1;
        }
    }
    for (&(a, b), &count) in &directed {
        if count != 1 {
            return Err(format!("directed edge ({a},{b}) used {count} times"));
        }
        if directed.get(&(b, a)).copied().unwrap_or(0) != 1 {
            return Err(format!("edge ({a},{b}) lacks an opposite-orientation partner"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::prior_sdf;
    use crate::field::PriorScene;

    #[test]
    fn edge_interp_symmetric_crossing() {
        let (p, t) = edge_interp(
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            -1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(p, Vec3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn edge_interp_linear_arithmetic() {
        let (p, t) = edge_interp(
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            -1.0,
            3.0,
        )
        .unwrap();
        assert!((t - 0.25).abs() < 1e-15);
        assert!((p - Vec3::new(0.25, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn edge_interp_rejects_equal_signs() {
        assert!(edge_interp(Vec3::zeros(), Vec3::zeros(), 1.0, 2.0).is_err());
        assert!(edge_interp(Vec3::zeros(), Vec3::zeros(), -1.0, -2.0).is_err());
    }

    #[test]
    fn all_positive_field_extracts_nothing() {
        let grid = TetGrid::new(4).unwrap();
        let params = FieldParams::constant(&grid, 0.5);
        let mesh = marching_tets(&grid, &params);
        assert!(mesh.is_empty());
        assert!(mesh.vertices.is_empty());
    }

    #[test]
    fn single_negative_vertex_emits_one_triangle_per_incident_pattern() {
        for apex in 0..4 {
            let mut inside = [false; 4];
            inside[apex] = true;
            let tris = classify_tet(inside);
            assert_eq!(tris.len(), 1);
            for e in tris[0] {
                let (a, b) = TET_EDGES[e];
                assert!(a == apex || b == apex, "edge {e} not incident to apex {apex}");
            }
        }
    }

    #[test]
    fn two_negative_vertices_emit_two_triangles() {
        for a in 0..4 {
            for b in a + 1..4 {
                let mut inside = [false; 4];
                inside[a] = true;
                inside[b] = true;
                let tris = classify_tet(inside);
                assert_eq!(tris.len(), 2);
            }
        }
    }

    #[test]
    fn sphere_extraction_vertices_near_surface() {
        let grid = TetGrid::new(16).unwrap();
        let scene = PriorScene::sphere(Vec3::zeros(), 0.5).unwrap();
        let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        let mesh = marching_tets(&grid, &params);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!(prior_sdf(&scene, *v).abs() <= grid.spacing());
        }
        watertight_census(&mesh).unwrap();
    }

    #[test]
    fn sign_flip_gives_same_vertices_reversed_orientation() {
        let grid = TetGrid::new(6).unwrap();
        let scene = PriorScene::sphere(Vec3::new(0.1, 0.0, -0.05), 0.4).unwrap();
        let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        let mut flipped = params.clone();
        for s in &mut flipped.sdf {
            *s = -*s;
        }
        let a = marching_tets(&grid, &params);
        let b = marching_tets(&grid, &flipped);
        assert_eq!(a.vertices.len(), b.vertices.len());
        let mut av: Vec<_> = a.vertices.iter().map(|v| format!("{:?}", v)).collect();
        let mut bv: Vec<_> = b.vertices.iter().map(|v| format!("{:?}", v)).collect();
        av.sort();
        bv.sort();
        assert_eq!(av, bv);
        // orientations reverse: average dot of matched face normals is -1
        // (triangle sets differ only in winding, possibly quad diagonals)
        watertight_census(&a).unwrap();
        watertight_census(&b).unwrap();
    }

    #[test]
    fn determinism_identical_meshes() {
        let grid = TetGrid::new(8).unwrap();
        let scene = PriorScene::sphere(Vec3::new(0.0, 0.1, 0.0), 0.45).unwrap();
        let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        let a = marching_tets(&grid, &params);
        let b = marching_tets(&grid, &params);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_rejects_missing_provenance() {
        let grid = TetGrid::new(2).unwrap();
        let params = FieldParams::constant(&grid, 0.5);
        let mesh = SurfaceMesh::from_parts(vec![Vec3::zeros()], vec![]);
        let err = mt_backward(&grid, &params, &mesh, &[Vec3::zeros()]).unwrap_err();
        assert!(matches!(err, Error::ProvenanceMismatch(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let grid = TetGrid::new(4).unwrap();
        let scene = PriorScene::sphere(Vec3::zeros(), 0.5).unwrap();
        let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        let mesh = marching_tets(&grid, &params);
        let upstream = vec![Vec3::zeros(); mesh.vertices.len()];
        let grads = mt_backward(&grid, &params, &mesh, &upstream).unwrap();
        assert_eq!(grads.norm_l2(), 0.0);
    }

    #[test]
    fn non_crossing_edges_receive_no_gradient() {
        let grid = TetGrid::new(4).unwrap();
        let scene = PriorScene::sphere(Vec3::zeros(), 0.5).unwrap();
        let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        let mesh = marching_tets(&grid, &params);
        let upstream = vec![Vec3::new(1.0, 0.5, -0.25); mesh.vertices.len()];
        let grads = mt_backward(&grid, &params, &mesh, &upstream).unwrap();
        // vertices on no crossing edge must have zero sdf gradient
        let mut on_crossing = vec![false; grid.vertex_count()];
        for p in &mesh.provenance {
            on_crossing[p.edge.0 as usize] = true;
            on_crossing[p.edge.1 as usize] = true;
        }
        for (i, &g) in grads.sdf.iter().enumerate() {
            if !on_crossing[i] {
                assert_eq!(g, 0.0, "vertex {i} got gradient without a crossing");
            }
        }
    }
}
