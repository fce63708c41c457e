//! Camera sampling and a deterministic software rasterizer producing
//! world-space normal maps and Lambertian color images, with adjoints
//! through the shading attributes.
//!
//! Coverage (which pixel sees which triangle) is treated as constant in the
//! backward pass; gradients flow through face normals (via the normalized
//! cross product) and through interpolated albedo only. Background pixels
//! hold (0,0,0) with the mask false.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::{Image, Mask};
use crate::tessellate::SurfaceMesh;
use crate::{Error, Result, Vec3};

/// Spherical camera looking at the origin with up +y.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub radius: f64,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub fov_y_deg: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraPose {
    pub fn position(&self) -> Vec3 {
        let kappa = self.elevation_deg.to_radians();
        let phi = self.azimuth_deg.to_radians();
        Vec3::new(
            self.radius * kappa.cos() * phi.sin(),
            self.radius * kappa.sin(),
            self.radius * kappa.cos() * phi.cos(),
        )
    }

    /// Orthonormal (right, up, forward) basis; forward points at the origin.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let eye = self.position();
        let forward = (-eye).normalize();
        let world_up = Vec3::new(0.0, 1.0, 0.0);
        let mut right = forward.cross(&world_up);
        if right.norm() < 1e-9 {
            // looking straight up/down; fall back to a fixed right axis
            right = Vec3::new(1.0, 0.0, 0.0);
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        (right, up, forward)
    }
}

/// Batched pose sampling: the azimuth range [-180, 180) is split into `l`
/// equal intervals with `b` uniform draws in each; elevation is uniform in
/// its range. Per pose the draw order is azimuth then elevation.
#[allow(clippy::too_many_arguments)]
pub fn sample_cameras(
    batch: usize,
    intervals: usize,
    elevation_min_deg: f64,
    elevation_max_deg: f64,
    radius: f64,
    fov_y_deg: f64,
    resolution: (usize, usize),
    seed: u64,
) -> Vec<CameraPose> {
    assert!(batch >= 1 && intervals >= 1, "batch and intervals must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 360.0 / intervals as f64;
    let mut poses = Vec::with_capacity(batch * intervals);
    for j in 0..intervals {
        let lo = -180.0 + span * j as f64;
        for _ in 0..batch {
            let azimuth = rng.random_range(lo..lo + span);
            let elevation = if elevation_max_deg > elevation_min_deg {
                rng.random_range(elevation_min_deg..elevation_max_deg)
            } else {
                elevation_min_deg
            };
            poses.push(CameraPose {
                radius,
                elevation_deg: elevation,
                azimuth_deg: azimuth,
                fov_y_deg,
                height: resolution.0,
                width: resolution.1,
            });
        }
    }
    poses
}

/// Rendered H x W x 3 normal image: world-space unit normals encoded as
/// (n+1)/2, background (0,0,0), with a coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub pixels: Image,
    pub mask: Mask,
}

#[inline]
pub fn encode_normal(n: Vec3) -> [f64; 3] {
    [(n.x + 1.0) * 0.5, (n.y + 1.0) * 0.5, (n.z + 1.0) * 0.5]
}

#[inline]
pub fn decode_normal(p: [f64; 3]) -> Vec3 {
    Vec3::new(2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0, 2.0 * p[2] - 1.0)
}

/// One RGB triple per grid vertex, interpolated onto the surface like sdf
/// (edge crossing first, then screen barycentrics). Channels clamp to
/// [0,1] on read.
#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoField {
    pub rgb: Vec<[f64; 3]>,
}

impl AlbedoField {
    pub fn constant(vertex_count: usize, value: [f64; 3]) -> Self {
        AlbedoField {
            rgb: vec![value; vertex_count],
        }
    }

    #[inline]
    pub fn read(&self, vertex: usize) -> [f64; 3] {
        let raw = self.rgb[vertex];
        [
            raw[0].clamp(0.0, 1.0),
            raw[1].clamp(0.0, 1.0),
            raw[2].clamp(0.0, 1.0),
        ]
    }
}

/// Per-pixel rasterization record kept for the backward passes.
#[derive(Debug, Clone)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    /// Winning triangle per pixel, -1 for background.
    pub tri: Vec<i64>,
    /// Screen-space barycentric weights over the triangle's vertices.
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub mask: Mask,
}

struct ProjectedVertex {
    px: f64,
    py: f64,
    z: f64,
}

const NEAR_PLANE: f64 = 1e-9;
const MIN_PROJECTED_AREA: f64 = 1e-12;

fn project_vertices(mesh: &SurfaceMesh, camera: &CameraPose) -> Vec<ProjectedVertex> {
    let eye = camera.position();
    let (right, up, forward) = camera.basis();
    let tan_half = (camera.fov_y_deg.to_radians() * 0.5).tan();
    let aspect = camera.width as f64 / camera.height as f64;
    mesh.vertices
        .iter()
        .map(|&v| {
            let d = v - eye;
            let z = d.dot(&forward);
            let (px, py) = if z > NEAR_PLANE {
                let xn = d.dot(&right) / (z * tan_half * aspect);
                let yn = d.dot(&up) / (z * tan_half);
                (
                    (xn + 1.0) * 0.5 * camera.width as f64,
                    (1.0 - yn) * 0.5 * camera.height as f64,
                )
            } else {
                (f64::NAN, f64::NAN)
            };
            ProjectedVertex { px, py, z }
        })
        .collect()
}

#[inline]
fn orient2d(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Top-left fill rule for pixel-center ties: with interior-positive edge
/// functions in a y-down frame, accept zero on horizontal edges going left
/// and on edges going down.
#[inline]
fn is_top_left(ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    (ay == by && bx < ax) || by > ay
}

/// Z-buffered triangle fill. Triangles are drawn in index order with a
/// strict depth test, so output is deterministic; back faces (normal
/// pointing away from the camera) are culled, as are triangles crossing
/// the near plane or with projected area below 1e-12.
pub fn rasterize(mesh: &SurfaceMesh, camera: &CameraPose) -> Raster {
    let (h, w) = (camera.height, camera.width);
    let mut raster = Raster {
        height: h,
        width: w,
        tri: vec![-1; h * w],
        bary: vec![[0.0; 3]; h * w],
        depth: vec![f64::INFINITY; h * w],
        mask: Mask::new_false(h, w),
    };
    if mesh.is_empty() {
        return raster;
    }
    let eye = camera.position();
    let projected = project_vertices(mesh, camera);

    for (ti, tri) in mesh.triangles.iter().enumerate() {
        let n = mesh.face_normals[ti];
        let centroid = (mesh.vertices[tri[0] as usize]
            + mesh.vertices[tri[1] as usize]
            + mesh.vertices[tri[2] as usize])
            / 3.0;
        if n.dot(&(centroid - eye)) >= 0.0 {
            continue; // back-facing
        }
        let p0 = &projected[tri[0] as usize];
        let p1 = &projected[tri[1] as usize];
        let p2 = &projected[tri[2] as usize];
        if p0.z <= NEAR_PLANE || p1.z <= NEAR_PLANE || p2.z <= NEAR_PLANE {
            continue;
        }
        let area2 = orient2d(p0.px, p0.py, p1.px, p1.py, p2.px, p2.py);
        if area2.abs() * 0.5 <= MIN_PROJECTED_AREA {
            continue;
        }
        // Order vertices so edge functions are interior-positive; keep the
        // original corner index alongside so barycentrics stay attached to
        // the right vertices.
        let (v, area2) = if area2 > 0.0 {
            ([(0usize, p0), (1, p1), (2, p2)], area2)
        } else {
            ([(0usize, p0), (2, p2), (1, p1)], -area2)
        };

        let min_x = v[0].1.px.min(v[1].1.px).min(v[2].1.px).floor().max(0.0) as usize;
        let max_x = (v[0].1.px.max(v[1].1.px).max(v[2].1.px).ceil() as isize).min(w as isize - 1);
        let min_y = v[0].1.py.min(v[1].1.py).min(v[2].1.py).floor().max(0.0) as usize;
        let max_y = (v[0].1.py.max(v[1].1.py).max(v[2].1.py).ceil() as isize).min(h as isize - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }
        let (max_x, max_y) = (max_x as usize, max_y as usize);
        if min_x > max_x || min_y > max_y {
            continue;
        }

        let accepts = [
            is_top_left(v[1].1.px, v[1].1.py, v[2].1.px, v[2].1.py),
            is_top_left(v[2].1.px, v[2].1.py, v[0].1.px, v[0].1.py),
            is_top_left(v[0].1.px, v[0].1.py, v[1].1.px, v[1].1.py),
        ];
        for y in min_y..=max_y {
            let cy = y as f64 + 0.5;
            for x in min_x..=max_x {
                let cx = x as f64 + 0.5;
                let w0 = orient2d(v[1].1.px, v[1].1.py, v[2].1.px, v[2].1.py, cx, cy);
                let w1 = orient2d(v[2].1.px, v[2].1.py, v[0].1.px, v[0].1.py, cx, cy);
                let w2 = orient2d(v[0].1.px, v[0].1.py, v[1].1.px, v[1].1.py, cx, cy);
                let inside = (w0 > 0.0 || (w0 == 0.0 && accepts[0]))
                    && (w1 > 0.0 || (w1 == 0.0 && accepts[1]))
                    && (w2 > 0.0 || (w2 == 0.0 && accepts[2]));
                if !inside {
                    continue;
                }
                let mut bary = [0.0; 3];
                bary[v[0].0] = w0 / area2;
                bary[v[1].0] = w1 / area2;
                bary[v[2].0] = w2 / area2;
                let depth = bary[0] * p0.z + bary[1] * p1.z + bary[2] * p2.z;
                let idx = y * w + x;
                if depth < raster.depth[idx] {
                    raster.depth[idx] = depth;
                    raster.tri[idx] = ti as i64;
                    raster.bary[idx] = bary;
                    raster.mask.set(y, x, true);
                }
            }
        }
    }
    raster
}

/// Render the mesh's face normals into an encoded normal map.
pub fn rasterize_normals(mesh: &SurfaceMesh, camera: &CameraPose) -> (NormalMap, Raster) {
    let raster = rasterize(mesh, camera);
    let mut pixels = Image::zeros(raster.height, raster.width, 3);
    for y in 0..raster.height {
        for x in 0..raster.width {
            let idx = y * raster.width + x;
            if raster.tri[idx] >= 0 {
                let enc = encode_normal(mesh.face_normals[raster.tri[idx] as usize]);
                pixels.set(y, x, 0, enc[0]);
                pixels.set(y, x, 1, enc[1]);
                pixels.set(y, x, 2, enc[2]);
            }
        }
    }
    (
        NormalMap {
            pixels,
            mask: raster.mask.clone(),
        },
        raster,
    )
}

/// Albedo at a surface vertex: edge-interpolated grid albedo via the
/// vertex's provenance, channels clamped on read.
fn vertex_albedo(mesh: &SurfaceMesh, albedo: &AlbedoField, vertex: usize) -> [f64; 3] {
    let prov = &mesh.provenance[vertex];
    let a = albedo.read(prov.edge.0 as usize);
    let b = albedo.read(prov.edge.1 as usize);
    let t = prov.t;
    [
        (1.0 - t) * a[0] + t * b[0],
        (1.0 - t) * a[1] + t * b[1],
        (1.0 - t) * a[2] + t * b[2],
    ]
}

/// Lambertian shading: albedo(surface point) * max(0, n . light), clamped
/// to [0,1]. Requires a mesh with provenance (the albedo lives on the
/// grid).
pub fn rasterize_color(
    mesh: &SurfaceMesh,
    albedo: &AlbedoField,
    camera: &CameraPose,
    light: Vec3,
) -> Result<(Image, Mask, Raster)> {
    if mesh.provenance.len() != mesh.vertices.len() {
        return Err(Error::ProvenanceMismatch(
            "color rendering needs per-vertex provenance".into(),
        ));
    }
    let raster = rasterize(mesh, camera);
    let mut pixels = Image::zeros(raster.height, raster.width, 3);
    for y in 0..raster.height {
        for x in 0..raster.width {
            let idx = y * raster.width + x;
            if raster.tri[idx] < 0 {
                continue;
            }
            let ti = raster.tri[idx] as usize;
            let tri = mesh.triangles[ti];
            let lambert = mesh.face_normals[ti].dot(&light).max(0.0);
            let bary = raster.bary[idx];
            for c in 0..3 {
                let mut a = 0.0;
                for k in 0..3 {
                    a += bary[k] * vertex_albedo(mesh, albedo, tri[k] as usize)[c];
                }
                pixels.set(y, x, c, (a * lambert).clamp(0.0, 1.0));
            }
        }
    }
    Ok((pixels, raster.mask.clone(), raster))
}

/// Backward of `rasterize_normals`: upstream gradient on the encoded
/// pixels flows through the (n+1)/2 encoding and the normalized cross
/// product into vertex positions. Background pixels are detached.
pub fn normal_raster_backward(
    mesh: &SurfaceMesh,
    raster: &Raster,
    upstream: &Image,
) -> Result<Vec<Vec3>> {
    if upstream.height != raster.height || upstream.width != raster.width || upstream.channels != 3
    {
        return Err(Error::ShapeMismatch("normal backward upstream".into()));
    }
    // accumulate dL/dn per face
    let mut dn = vec![Vec3::zeros(); mesh.triangles.len()];
    for y in 0..raster.height {
        for x in 0..raster.width {
            let idx = y * raster.width + x;
            if raster.tri[idx] < 0 {
                continue;
            }
            let ti = raster.tri[idx] as usize;
            dn[ti] += Vec3::new(
                upstream.get(y, x, 0),
                upstream.get(y, x, 1),
                upstream.get(y, x, 2),
            ) * 0.5;
        }
    }
    face_normal_backward(mesh, &dn)
}

/// Chain dL/d(face normal) into dL/d(vertex position) through the
/// normalized cross product.
pub fn face_normal_backward(mesh: &SurfaceMesh, dn: &[Vec3]) -> Result<Vec<Vec3>> {
    if dn.len() != mesh.triangles.len() {
        return Err(Error::ShapeMismatch("face normal gradient length".into()));
    }
    let mut dv = vec![Vec3::zeros(); mesh.vertices.len()];
    for (ti, tri) in mesh.triangles.iter().enumerate() {
        let g = dn[ti];
        if g == Vec3::zeros() {
            continue;
        }
        let v0 = mesh.vertices[tri[0] as usize];
        let v1 = mesh.vertices[tri[1] as usize];
        let v2 = mesh.vertices[tri[2] as usize];
        let e1 = v1 - v0;
        let e2 = v2 - v0;
        let c = e1.cross(&e2);
        let len = c.norm();
        if len < 1e-30 {
            continue;
        }
        let n = c / len;
        // dL/dc = (I - n n^T) g / |c|
        let dc = (g - n * n.dot(&g)) / len;
        let de1 = e2.cross(&dc);
        let de2 = dc.cross(&e1);
        dv[tri[1] as usize] += de1;
        dv[tri[2] as usize] += de2;
        dv[tri[0] as usize] -= de1 + de2;
    }
    Ok(dv)
}

/// Gradients of `rasterize_color` with respect to the grid albedo and the
/// mesh vertex positions (the latter via the Lambert term's face normal).
pub fn color_raster_backward(
    mesh: &SurfaceMesh,
    albedo: &AlbedoField,
    raster: &Raster,
    light: Vec3,
    upstream: &Image,
) -> Result<(Vec<[f64; 3]>, Vec<Vec3>)> {
    if upstream.height != raster.height || upstream.width != raster.width || upstream.channels != 3
    {
        return Err(Error::ShapeMismatch("color backward upstream".into()));
    }
    if mesh.provenance.len() != mesh.vertices.len() {
        return Err(Error::ProvenanceMismatch(
            "color backward needs per-vertex provenance".into(),
        ));
    }
    let mut d_albedo = vec![[0.0; 3]; albedo.rgb.len()];
    let mut dn = vec![Vec3::zeros(); mesh.triangles.len()];
    for y in 0..raster.height {
        for x in 0..raster.width {
            let idx = y * raster.width + x;
            if raster.tri[idx] < 0 {
                continue;
            }
            let ti = raster.tri[idx] as usize;
            let tri = mesh.triangles[ti];
            let n = mesh.face_normals[ti];
            let ndotl = n.dot(&light);
            let lambert = ndotl.max(0.0);
            let bary = raster.bary[idx];
            for c in 0..3 {
                let mut a_px = 0.0;
                for k in 0..3 {
                    a_px += bary[k] * vertex_albedo(mesh, albedo, tri[k] as usize)[c];
                }
                let pre_clamp = a_px * lambert;
                let up = upstream.get(y, x, c);
                if up == 0.0 {
                    continue;
                }
                // clamp subgradient: zero outside [0,1]
                if !(0.0..=1.0).contains(&pre_clamp) {
                    continue;
                }
                // albedo path
                if lambert > 0.0 {
                    let d_a_px = up * lambert;
                    for k in 0..3 {
                        let prov = &mesh.provenance[tri[k] as usize];
                        let w = bary[k] * d_a_px;
                        for (gv, share) in [
                            (prov.edge.0 as usize, 1.0 - prov.t),
                            (prov.edge.1 as usize, prov.t),
                        ] {
                            // clamp-on-read subgradient
                            if (0.0..=1.0).contains(&albedo.rgb[gv][c]) {
                                d_albedo[gv][c] += w * share;
                            }
                        }
                    }
                }
                // Lambert path into the face normal
                if ndotl > 0.0 {
                    dn[ti] += light * (up * a_px);
                }
            }
        }
    }
    let dv = face_normal_backward(mesh, &dn)?;
    Ok((d_albedo, dv))
}
