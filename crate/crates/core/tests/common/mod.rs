//! Shared helpers for the integration and acceptance tests: an
//! implementation-independent finite-difference oracle, deterministic
//! pseudo-random values, and the standard experiment setup.

#![allow(dead_code)]

use std::sync::Arc;

use sherpa_lift::field::{fit_prior, FieldParams, FitConfig, PriorScene, SampleCounts, TetGrid};
use sherpa_lift::optimize::{CameraConfig, MeshNormalConditions};
use sherpa_lift::score::{default_schedule, DiffusionSchedule, PointMassProvider};
use sherpa_lift::tessellate::{marching_tets, SurfaceMesh};
use sherpa_lift::Vec3;

/// Central finite difference, the independent oracle for every adjoint
/// check in this suite.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero denominators.
pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(floor)
}

/// Deterministic uniform values in [0,1) without pulling in a RNG crate
/// dependency for the oracle side.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn unit(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

pub fn sphere_scene() -> PriorScene {
    PriorScene::sphere(Vec3::zeros(), 0.5).expect("sphere scene")
}

/// Lower-bound SDF for the axis-scaled sphere; exact zero set. This is
/// the oracle error measure for the lifting experiment.
pub fn ellipsoid_oracle_sdf(p: Vec3, scale: Vec3, radius: f64) -> f64 {
    let q = Vec3::new(p.x / scale.x, p.y / scale.y, p.z / scale.z);
    (q.norm() - radius) * scale.x.min(scale.y).min(scale.z)
}

pub fn mean_oracle_error(mesh: &SurfaceMesh, scale: Vec3) -> f64 {
    assert!(!mesh.vertices.is_empty());
    mesh.vertices
        .iter()
        .map(|v| ellipsoid_oracle_sdf(*v, scale, 0.5).abs())
        .sum::<f64>()
        / mesh.vertices.len() as f64
}

pub struct Experiment {
    pub grid: TetGrid,
    pub fitted: FieldParams,
    pub schedule: Arc<DiffusionSchedule>,
    pub provider: PointMassProvider,
    pub conditions: MeshNormalConditions,
    pub camera: CameraConfig,
    pub target_scale: Vec3,
}

/// The standard lifting experiment: a fitted sphere prior and an analytic
/// provider conditioned on renders of the (1.0, 0.7, 0.7)-scaled sphere.
pub fn lifting_experiment(resolution: usize, render_res: usize) -> Experiment {
    let grid = TetGrid::new(resolution).expect("grid");
    let scene = sphere_scene();
    let (fitted, _) = fit_prior(
        &grid,
        &scene,
        &FitConfig {
            iterations: 400,
            counts: SampleCounts {
                surface: 1024,
                near: 1024,
                uniform: 4096,
            },
            seed: 7,
            ..FitConfig::default()
        },
    )
    .expect("fit");
    let target_scale = Vec3::new(1.0, 0.7, 0.7);
    let target_params = sherpa_lift::optimize::target_field(&grid, &scene, target_scale);
    let target_mesh = marching_tets(&grid, &target_params);
    let schedule = Arc::new(default_schedule());
    Experiment {
        provider: PointMassProvider::new(schedule.clone()),
        conditions: MeshNormalConditions { mesh: target_mesh },
        grid,
        fitted,
        schedule,
        camera: CameraConfig {
            resolution: render_res,
            ..CameraConfig::default()
        },
        target_scale,
    }
}
