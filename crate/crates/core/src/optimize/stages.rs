//! Geometry lifting and appearance optimization stages: per-iteration
//! camera batches, score-distillation gradients chained through the
//! rasterizer and marching-tet adjoints, and guidance regularization
//! against a frozen prior snapshot.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::field::{FieldGrads, FieldParams, TetGrid, OFFSET_CAP_FACTOR};
use crate::guidance::{
    anneal, semantic_loss, structural_loss, GuidanceConfig, SemanticEncoder,
};
use crate::image::Image;
use crate::optimize::adam::{AdamState, LrSchedule};
use crate::optimize::config::{CameraConfig, GeometrySection, LightMode};
use crate::render::{
    color_raster_backward, normal_raster_backward, rasterize_color, rasterize_normals,
    AlbedoField, CameraPose, NormalMap,
};
use crate::score::{
    sample_timestep, sds_image_gradient, ConditionToken, DiffusionSchedule, ScoreProvider,
    TimestepStrategy, WeightSchedule,
};
use crate::tessellate::{marching_tets, mt_backward, SurfaceMesh};
use crate::{Error, Result, Vec3};

/// Supplies the conditioning token (the analytic stand-in for the text
/// embedding) for a camera.
pub trait ConditionSource: Send + Sync {
    fn token_for(&self, camera: &CameraPose) -> Result<ConditionToken>;
}

/// Conditions on normal-map renders of a fixed target mesh.
pub struct MeshNormalConditions {
    pub mesh: SurfaceMesh,
}

impl ConditionSource for MeshNormalConditions {
    fn token_for(&self, camera: &CameraPose) -> Result<ConditionToken> {
        let (nm, _) = rasterize_normals(&self.mesh, camera);
        Ok(ConditionToken::target(nm.pixels))
    }
}

/// Conditions on Lambertian color renders of a fixed mesh and albedo.
pub struct MeshColorConditions {
    pub mesh: SurfaceMesh,
    pub albedo: AlbedoField,
    pub light: LightMode,
}

impl ConditionSource for MeshColorConditions {
    fn token_for(&self, camera: &CameraPose) -> Result<ConditionToken> {
        let light = self.light.direction(camera.position());
        let (img, _, _) = rasterize_color(&self.mesh, &self.albedo, camera, light)?;
        Ok(ConditionToken::target(img))
    }
}

/// Score-side context for one iteration: the provider pair plus the shared
/// (t, eps) draw for the batch.
pub struct ScoreContext<'a> {
    pub provider: &'a dyn ScoreProvider,
    pub conditions: &'a dyn ConditionSource,
    pub schedule: &'a DiffusionSchedule,
    pub cfg_scale: f64,
    pub weight: WeightSchedule,
    pub t: usize,
    pub eps: &'a Image,
}

/// Standard-normal noise image from a seeded generator (Box-Muller).
pub fn noise_image(height: usize, width: usize, channels: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::zeros(height, width, channels);
    for v in &mut img.data {
        let u1: f64 = rng.random_range(1e-300..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    img
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GeometryDiagnostics {
    pub sds_residual_norm: f64,
    pub l_struc: f64,
    pub l_sem: f64,
    pub gamma_struc: f64,
    pub gamma_sem: f64,
    pub t: usize,
}

/// One metrics-log line; the schema is fixed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub sds_residual_norm: f64,
    pub l_struc: f64,
    pub l_sem: f64,
    pub gamma_struc: f64,
    pub gamma_sem: f64,
    pub t: usize,
    pub wall_ms: f64,
}

struct ViewForward {
    live_map: NormalMap,
    prior_map: NormalMap,
    raster: crate::render::Raster,
    sds_grad: Image,
    sds_norm_sq: f64,
}

/// The assembled geometry objective at one iteration: the SDS image
/// gradient plus annealed structural and semantic guidance, chained back
/// to (sdf, offset) gradients. The SDS term contributes only a gradient;
/// its residual norm is reported as a diagnostic.
#[allow(clippy::too_many_arguments)]
pub fn geometry_loss(
    grid: &TetGrid,
    prior_params: &FieldParams,
    live_params: &FieldParams,
    cameras: &[CameraPose],
    gcfg: &GuidanceConfig,
    encoder: &dyn SemanticEncoder,
    score: &ScoreContext,
    iteration: usize,
) -> Result<(GeometryDiagnostics, FieldGrads)> {
    let prior_mesh = marching_tets(grid, prior_params);
    let live_mesh = marching_tets(grid, live_params);

    // per-view forward passes are independent; results are combined in
    // camera order so reductions are deterministic
    let views: Vec<Result<ViewForward>> = cameras
        .par_iter()
        .map(|cam| {
            let (prior_map, _) = rasterize_normals(&prior_mesh, cam);
            let (live_map, raster) = rasterize_normals(&live_mesh, cam);
            let token = score.conditions.token_for(cam)?;
            let sds_grad = sds_image_gradient(
                score.provider,
                &live_map.pixels,
                &token,
                score.t,
                score.eps,
                score.cfg_scale,
                &score.weight,
                score.schedule,
            )?;
            let sds_norm_sq = sds_grad.data.iter().map(|v| v * v).sum();
            Ok(ViewForward {
                live_map,
                prior_map,
                raster,
                sds_grad,
                sds_norm_sq,
            })
        })
        .collect();
    let views: Vec<ViewForward> = views.into_iter().collect::<Result<_>>()?;

    let prior_maps: Vec<NormalMap> = views.iter().map(|v| v.prior_map.clone()).collect();
    let live_maps: Vec<NormalMap> = views.iter().map(|v| v.live_map.clone()).collect();

    let (l_struc, struc_grads) = structural_loss(&prior_maps, &live_maps, gcfg)?;

    let prior_feats: Vec<_> = prior_maps.iter().map(|m| encoder.encode(&m.pixels)).collect();
    let live_feats: Vec<_> = live_maps.iter().map(|m| encoder.encode(&m.pixels)).collect();
    let (l_sem, feat_grads) = semantic_loss(&prior_feats, &live_feats)?;

    let gamma_struc = anneal(gcfg.lambda_struc, iteration, gcfg.beta, gcfg.m);
    let gamma_sem = anneal(gcfg.lambda_sem, iteration, gcfg.beta, gcfg.m);

    let mut vertex_grad = vec![Vec3::zeros(); live_mesh.vertices.len()];
    let mut sds_norm_sq_total = 0.0;
    for (i, view) in views.iter().enumerate() {
        sds_norm_sq_total += view.sds_norm_sq;
        let mut total = view.sds_grad.clone();
        if gamma_struc != 0.0 {
            total.axpy(gamma_struc, &struc_grads[i]);
        }
        if gamma_sem != 0.0 {
            let sem_img = encoder.backward(&view.live_map.pixels, &feat_grads[i]);
            total.axpy(gamma_sem, &sem_img);
        }
        let dv = normal_raster_backward(&live_mesh, &view.raster, &total)?;
        for (acc, g) in vertex_grad.iter_mut().zip(dv) {
            *acc += g;
        }
    }

    let grads = mt_backward(grid, live_params, &live_mesh, &vertex_grad)?;
    let diag = GeometryDiagnostics {
        sds_residual_norm: sds_norm_sq_total.sqrt(),
        l_struc,
        l_sem,
        gamma_struc,
        gamma_sem,
        t: score.t,
    };
    Ok((diag, grads))
}

/// Everything a stage needs beyond its own parameters.
pub struct StageEnv<'a> {
    pub grid: &'a TetGrid,
    pub camera: &'a CameraConfig,
    pub provider: &'a dyn ScoreProvider,
    pub conditions: &'a dyn ConditionSource,
    pub schedule: &'a DiffusionSchedule,
    pub cfg_scale: f64,
    pub weight: WeightSchedule,
    pub timesteps: TimestepStrategy,
}

pub struct GeometryStageResult {
    pub params: FieldParams,
    pub metrics: Vec<MetricsRecord>,
    /// (iteration, params) pairs captured every `snapshot_interval`
    /// iterations (the params entering that iteration) plus the final
    /// params; empty when the interval is 0.
    pub snapshots: Vec<(usize, FieldParams)>,
}

fn sample_batch(camera: &CameraConfig, seed: u64) -> Vec<CameraPose> {
    crate::render::sample_cameras(
        camera.batch,
        camera.intervals,
        camera.elevation_min,
        camera.elevation_max,
        camera.radius,
        camera.fov_y,
        (camera.resolution, camera.resolution),
        seed,
    )
}

/// Stage 2: freeze the fitted prior, then loop camera sampling, the
/// assembled geometry gradient, and Adam updates on sdf and offsets.
pub fn run_geometry_stage(
    env: &StageEnv,
    gcfg: &GuidanceConfig,
    encoder: &dyn SemanticEncoder,
    fitted: &FieldParams,
    stage: &GeometrySection,
    seed: u64,
) -> Result<GeometryStageResult> {
    let prior = fitted.clone();
    let mut params = fitted.clone();
    let cap = OFFSET_CAP_FACTOR * env.grid.spacing();
    let lr = LrSchedule::new(stage.lr_initial, stage.lr_final, stage.iterations);
    let mut sdf_state = AdamState::new(env.grid.vertex_count());
    let mut off_state = AdamState::new(env.grid.vertex_count() * 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_seed: u64 = rng.random();
    let mut metrics = Vec::with_capacity(stage.iterations);
    let mut snapshots = Vec::new();
    let res = env.camera.resolution;

    for iter in 0..stage.iterations {
        let start = Instant::now();
        if stage.snapshot_interval > 0 && iter % stage.snapshot_interval == 0 {
            snapshots.push((iter, params.clone()));
        }
        let cam_seed: u64 = rng.random();
        let eps = noise_image(res, res, 3, &mut rng);
        let t = sample_timestep(env.timesteps, iter, stage.iterations, env.schedule.len(), t_seed);
        let cameras = sample_batch(env.camera, cam_seed);
        let score = ScoreContext {
            provider: env.provider,
            conditions: env.conditions,
            schedule: env.schedule,
            cfg_scale: env.cfg_scale,
            weight: env.weight,
            t,
            eps: &eps,
        };
        let (diag, grads) = geometry_loss(
            env.grid, &prior, &params, &cameras, gcfg, encoder, &score, iter,
        )
        .map_err(|e| Error::StageFailure {
            stage: "geometry".into(),
            iteration: iter,
            message: e.to_string(),
        })?;
        if !(diag.l_struc.is_finite() && diag.l_sem.is_finite() && diag.sds_residual_norm.is_finite())
        {
            return Err(Error::StageFailure {
                stage: "geometry".into(),
                iteration: iter,
                message: "non-finite loss".into(),
            });
        }
        let step_lr = lr.at(iter);
        sdf_state
            .step(&mut params.sdf, &grads.sdf, step_lr, "geometry sdf")
            .map_err(|e| Error::StageFailure {
                stage: "geometry".into(),
                iteration: iter,
                message: e.to_string(),
            })?;
        off_state
            .step_vec3(&mut params.offset, &grads.offset, step_lr, "geometry offsets")
            .map_err(|e| Error::StageFailure {
                stage: "geometry".into(),
                iteration: iter,
                message: e.to_string(),
            })?;
        params.project_offsets(env.grid, cap);
        metrics.push(MetricsRecord {
            iteration: iter,
            sds_residual_norm: diag.sds_residual_norm,
            l_struc: diag.l_struc,
            l_sem: diag.l_sem,
            gamma_struc: diag.gamma_struc,
            gamma_sem: diag.gamma_sem,
            t: diag.t,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    if stage.snapshot_interval > 0 {
        snapshots.push((stage.iterations, params.clone()));
    }
    Ok(GeometryStageResult {
        params,
        metrics,
        snapshots,
    })
}

pub struct AppearanceStageResult {
    pub albedo: AlbedoField,
    pub metrics: Vec<MetricsRecord>,
}

/// Stage 3: geometry is frozen; only the per-vertex albedo is optimized,
/// driven by score-distillation gradients on color renders.
#[allow(clippy::too_many_arguments)]
pub fn run_appearance_stage(
    env: &StageEnv,
    geometry: &FieldParams,
    init_albedo: AlbedoField,
    light: LightMode,
    iterations: usize,
    lr_initial: f64,
    lr_final: f64,
    seed: u64,
) -> Result<AppearanceStageResult> {
    let mesh = marching_tets(env.grid, geometry);
    let mut albedo = init_albedo;
    let lr = LrSchedule::new(lr_initial, lr_final, iterations);
    let mut state = AdamState::new(albedo.rgb.len() * 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_seed: u64 = rng.random();
    let mut metrics = Vec::with_capacity(iterations);
    let res = env.camera.resolution;

    for iter in 0..iterations {
        let start = Instant::now();
        let cam_seed: u64 = rng.random();
        let eps = noise_image(res, res, 3, &mut rng);
        let t = sample_timestep(env.timesteps, iter, iterations, env.schedule.len(), t_seed);
        let cameras = sample_batch(env.camera, cam_seed);

        let per_view: Vec<Result<(Vec<[f64; 3]>, f64)>> = cameras
            .par_iter()
            .map(|cam| {
                let light_dir = light.direction(cam.position());
                let (img, _, raster) = rasterize_color(&mesh, &albedo, cam, light_dir)?;
                let token = env.conditions.token_for(cam)?;
                let sds_grad = sds_image_gradient(
                    env.provider,
                    &img,
                    &token,
                    t,
                    &eps,
                    env.cfg_scale,
                    &env.weight,
                    env.schedule,
                )?;
                let norm_sq: f64 = sds_grad.data.iter().map(|v| v * v).sum();
                let (d_albedo, _) =
                    color_raster_backward(&mesh, &albedo, &raster, light_dir, &sds_grad)?;
                Ok((d_albedo, norm_sq))
            })
            .collect();

        let mut grad = vec![[0.0f64; 3]; albedo.rgb.len()];
        let mut norm_sq_total = 0.0;
        for view in per_view {
            let (d_albedo, norm_sq) = view.map_err(|e| Error::StageFailure {
                stage: "appearance".into(),
                iteration: iter,
                message: e.to_string(),
            })?;
            norm_sq_total += norm_sq;
            for (acc, d) in grad.iter_mut().zip(&d_albedo) {
                acc[0] += d[0];
                acc[1] += d[1];
                acc[2] += d[2];
            }
        }

        let mut flat_p: Vec<f64> = albedo.rgb.iter().flatten().copied().collect();
        let flat_g: Vec<f64> = grad.iter().flatten().copied().collect();
        state
            .step(&mut flat_p, &flat_g, lr.at(iter), "albedo")
            .map_err(|e| Error::StageFailure {
                stage: "appearance".into(),
                iteration: iter,
                message: e.to_string(),
            })?;
        for (i, rgb) in albedo.rgb.iter_mut().enumerate() {
            *rgb = [flat_p[3 * i], flat_p[3 * i + 1], flat_p[3 * i + 2]];
        }

        metrics.push(MetricsRecord {
            iteration: iter,
            sds_residual_norm: norm_sq_total.sqrt(),
            l_struc: 0.0,
            l_sem: 0.0,
            gamma_struc: 0.0,
            gamma_sem: 0.0,
            t,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(AppearanceStageResult { albedo, metrics })
}
