//! Prior-fitting loss and the optimization loop that sculpts the field
//! onto a scene's oracle SDF.

use serde::Serialize;

use super::grid::{DeformedGrid, FieldParams, TetGrid, OFFSET_CAP_FACTOR};
use super::sample::{sample_prior_points, PointSample, SampleCounts};
use super::scene::{prior_sdf, PriorScene};
use crate::optimize::adam::{AdamState, LrSchedule};
use crate::{Error, Result, Vec3};

/// Gradients with the same block layout as [`FieldParams`].
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub sdf: Vec<f64>,
    pub offset: Vec<Vec3>,
}

impl FieldGrads {
    pub fn zeros(n: usize) -> Self {
        FieldGrads {
            sdf: vec![0.0; n],
            offset: vec![Vec3::zeros(); n],
        }
    }

    pub fn add_scaled(&mut self, other: &FieldGrads, s: f64) {
        for (a, b) in self.sdf.iter_mut().zip(&other.sdf) {
            *a += s * b;
        }
        for (a, b) in self.offset.iter_mut().zip(&other.offset) {
            *a += b * s;
        }
    }

    pub fn norm_l2(&self) -> f64 {
        let s: f64 = self.sdf.iter().map(|v| v * v).sum();
        let o: f64 = self.offset.iter().map(|v| v.norm_squared()).sum();
        (s + o).sqrt()
    }
}

/// Squared SDF residual over the samples plus the L2-norm offset
/// regularizer, with its exact adjoint.
///
/// The field value at a sample is the barycentric interpolation of the
/// per-vertex sdf inside the containing tet of the deformed lattice, so the
/// offset gradient carries the -w_i * grad_s term from differentiating the
/// barycentric weights with respect to corner positions.
pub fn prior_fit_loss(
    grid: &TetGrid,
    params: &FieldParams,
    samples: &[PointSample],
    lambda_def: f64,
) -> Result<(f64, FieldGrads)> {
    assert!(!samples.is_empty(), "prior_fit_loss needs at least one sample");
    let dg = DeformedGrid::new(grid, params);
    let mut loss = 0.0;
    let mut grads = FieldGrads::zeros(grid.vertex_count());

    for (i, sample) in samples.iter().enumerate() {
        let hit = dg.locate(sample.position).ok_or(Error::SampleOutsideGrid {
            index: i,
            x: sample.position.x,
            y: sample.position.y,
            z: sample.position.z,
        })?;
        let s = dg.interpolate(params, &hit);
        let r = s - sample.target_sdf;
        loss += r * r;
        let grad_s = dg.interpolant_gradient(params, &hit);
        let tet = &grid.tets[hit.tet];
        for corner in 0..4 {
            let v = tet[corner] as usize;
            let w = hit.weights[corner];
            grads.sdf[v] += 2.0 * r * w;
            grads.offset[v] += grad_s * (-w * 2.0 * r);
        }
    }

    for (v, off) in params.offset.iter().enumerate() {
        let n = off.norm();
        loss += lambda_def * n;
        if n > 1e-18 {
            grads.offset[v] += off * (lambda_def / n);
        }
    }

    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lambda_def: f64,
    pub counts: SampleCounts,
    pub band: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 500,
            lr_initial: 0.03,
            lr_final: 0.01,
            lambda_def: 0.1,
            counts: SampleCounts {
                surface: 1024,
                near: 1024,
                uniform: 8192,
            },
            band: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub iterations: usize,
    pub held_out_mae: f64,
}

const HELD_OUT_POINTS: usize = 1000;
const HELD_OUT_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Fit the field to the scene's oracle SDF by full-batch Adam on the
/// prior-fit loss. Deterministic given the seed. The initial field is the
/// constant +0.5 with zero offsets.
pub fn fit_prior(
    grid: &TetGrid,
    scene: &PriorScene,
    cfg: &FitConfig,
) -> Result<(FieldParams, FitReport)> {
    let samples = sample_prior_points(scene, cfg.counts, cfg.band, cfg.seed)?;
    let mut params = FieldParams::constant(grid, 0.5);
    let cap = OFFSET_CAP_FACTOR * grid.spacing();
    let lr = LrSchedule::new(cfg.lr_initial, cfg.lr_final, cfg.iterations);
    let mut sdf_state = AdamState::new(grid.vertex_count());
    let mut off_state = AdamState::new(grid.vertex_count() * 3);
    let mut final_loss = 0.0;

    if cfg.iterations > 0 && samples.is_empty() {
        return Err(Error::Scene("prior fit requested with zero samples".into()));
    }

    for iter in 0..cfg.iterations {
        let (loss, grads) = prior_fit_loss(grid, &params, &samples, cfg.lambda_def)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                block: format!("prior fit, iteration {iter}"),
            });
        }
        final_loss = loss;
        let step_lr = lr.at(iter);
        sdf_state.step(&mut params.sdf, &grads.sdf, step_lr, "field sdf")?;
        off_state.step_vec3(&mut params.offset, &grads.offset, step_lr, "field offsets")?;
        params.project_offsets(grid, cap);
    }

    if cfg.iterations == 0 && !samples.is_empty() {
        final_loss = prior_fit_loss(grid, &params, &samples, cfg.lambda_def)?.0;
    }

    let held_out_mae = held_out_mae(grid, &params, scene, cfg.seed ^ HELD_OUT_SEED_SALT)?;
    let report = FitReport {
        final_loss,
        iterations: cfg.iterations,
        held_out_mae,
    };
    Ok((params, report))
}

/// Mean |field - oracle| on freshly drawn uniform points.
pub fn held_out_mae(
    grid: &TetGrid,
    params: &FieldParams,
    scene: &PriorScene,
    seed: u64,
) -> Result<f64> {
    let points = sample_prior_points(
        scene,
        SampleCounts {
            surface: 0,
            near: 0,
            uniform: HELD_OUT_POINTS,
        },
        0.1,
        seed,
    )?;
    let dg = DeformedGrid::new(grid, params);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let hit = dg.locate(p.position).ok_or(Error::SampleOutsideGrid {
            index: i,
            x: p.position.x,
            y: p.position.y,
            z: p.position.z,
        })?;
        total += (dg.interpolate(params, &hit) - prior_sdf(scene, p.position)).abs();
    }
    Ok(total / points.len() as f64)
}
