//! Point-set sampling from a prior scene: surface, near-surface, and
//! uniform volume samples with oracle SDF targets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{prior_sdf, prior_sdf_gradient, PriorScene};
use crate::{Error, Result, Vec3};

/// A sample position with its oracle signed distance.
#[derive(Debug, Clone, Copy)]
pub struct PointSample {
    pub position: Vec3,
    pub target_sdf: f64,
}

/// Requested sample counts per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleCounts {
    pub surface: usize,
    pub near: usize,
    pub uniform: usize,
}

const MAX_PROJECTION_STEPS: usize = 256;
const SURFACE_TOL: f64 = 1e-9;
const BOX_LIMIT: f64 = 1.0 - 1e-9;

fn clamp_box(p: Vec3) -> Vec3 {
    Vec3::new(
        p.x.clamp(-BOX_LIMIT, BOX_LIMIT),
        p.y.clamp(-BOX_LIMIT, BOX_LIMIT),
        p.z.clamp(-BOX_LIMIT, BOX_LIMIT),
    )
}

fn uniform_point(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
}

/// Project a point onto the zero level set: distance-stepping descent
/// followed by damped Newton refinement on the SDF magnitude.
fn project_to_surface(scene: &PriorScene, start: Vec3, index: usize) -> Result<Vec3> {
    let mut p = start;
    for _ in 0..MAX_PROJECTION_STEPS {
        let d = prior_sdf(scene, p);
        if d.abs() <= SURFACE_TOL {
            return Ok(clamp_box(p));
        }
        let g = prior_sdf_gradient(scene, p);
        let gn = g.norm();
        if gn < 1e-12 {
            // ridge of the distance field; nudge off it deterministically
            p += Vec3::new(1e-4, 2e-4, -1e-4);
            continue;
        }
        // full sphere-trace step while far, damped Newton when close
        let step = if d.abs() > 1e-3 { d } else { d / gn.max(0.5) };
        p = clamp_box(p - g / gn * step);
    }
    Err(Error::SurfaceProjection { index })
}

/// Draws `counts.surface` on-surface samples, `counts.near` samples offset
/// along the surface normal within +-band, and `counts.uniform` samples
/// uniform in the box. Deterministic given the seed; blocks are drawn in
/// the order surface, near, uniform.
pub fn sample_prior_points(
    scene: &PriorScene,
    counts: SampleCounts,
    band: f64,
    seed: u64,
) -> Result<Vec<PointSample>> {
    assert!(band > 0.0, "band must be > 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.surface + counts.near + counts.uniform);

    for i in 0..counts.surface {
        let p = project_to_surface(scene, uniform_point(&mut rng), i)?;
        out.push(PointSample {
            position: p,
            target_sdf: prior_sdf(scene, p),
        });
    }
    for i in 0..counts.near {
        let base = project_to_surface(scene, uniform_point(&mut rng), counts.surface + i)?;
        let normal = {
            let g = prior_sdf_gradient(scene, base);
            let n = g.norm();
            if n < 1e-12 {
                Vec3::new(0.0, 1.0, 0.0)
            } else {
                g / n
            }
        };
        let offset: f64 = rng.random_range(-band..band);
        let p = clamp_box(base + normal * offset);
        out.push(PointSample {
            position: p,
            target_sdf: prior_sdf(scene, p),
        });
    }
    for _ in 0..counts.uniform {
        let p = uniform_point(&mut rng);
        out.push(PointSample {
            position: p,
            target_sdf: prior_sdf(scene, p),
        });
    }
    Ok(out)
}
