//! Three-stage pipeline: prior fitting, geometry lifting, appearance
//! optimization; writes the run directory (meshes, renders, metrics,
//! manifest).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::field::{fit_prior, FieldParams, FitConfig, FitReport, PriorScene, TetGrid};
use crate::guidance::{PatchStatsEncoder, RandomProjectionEncoder, SemanticEncoder};
use crate::io;
use crate::optimize::config::{AlbedoTarget, EncoderKind, RunConfig};
use crate::optimize::stages::{
    run_appearance_stage, run_geometry_stage, MeshColorConditions, MeshNormalConditions,
    MetricsRecord, StageEnv,
};
use crate::render::{rasterize_color, rasterize_normals, AlbedoField, CameraPose};
use crate::score::{make_schedule, PointMassProvider};
use crate::tessellate::{marching_tets, SurfaceMesh};
use crate::{Error, Result, Vec3};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
    /// sha256 per artifact, keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Artifacts excluded from checksumming (they carry wall-clock times).
    pub unchecksummed: Vec<String>,
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub fit_report: FitReport,
    pub geometry_iterations: usize,
    pub appearance_iterations: usize,
    pub final_l_struc: Option<f64>,
    pub final_l_sem: Option<f64>,
}

/// Grid-sampled field of the (optionally per-axis scaled) target scene.
pub fn target_field(grid: &TetGrid, scene: &PriorScene, scale: Vec3) -> FieldParams {
    let scaled = scene.scaled(scale);
    FieldParams::from_fn(grid, |p| scaled.sdf(p))
}

pub fn build_encoder(cfg: &RunConfig) -> Box<dyn SemanticEncoder> {
    match cfg.guidance.encoder {
        EncoderKind::PatchStats => Box::new(PatchStatsEncoder::new(cfg.guidance.patches)),
        EncoderKind::RandomProjection => Box::new(RandomProjectionEncoder::new(
            cfg.guidance.feature_dim,
            cfg.seed ^ 0x5EED_ECDE_u64,
            cfg.camera.resolution,
            cfg.camera.resolution,
            3,
        )),
    }
}

pub fn target_albedo(grid: &TetGrid, target: AlbedoTarget) -> AlbedoField {
    match target {
        AlbedoTarget::Constant(rgb) => AlbedoField::constant(grid.vertex_count(), rgb),
        AlbedoTarget::Position => AlbedoField {
            rgb: grid
                .vertices
                .iter()
                .map(|v| {
                    [
                        (v.x + 1.0) * 0.5,
                        (v.y + 1.0) * 0.5,
                        (v.z + 1.0) * 0.5,
                    ]
                })
                .collect(),
        },
    }
}

/// Four fixed sample poses for the run directory's renders.
fn sample_poses(cfg: &RunConfig) -> Vec<CameraPose> {
    [0.0, 90.0, 180.0, 270.0]
        .iter()
        .map(|&azimuth| CameraPose {
            radius: cfg.camera.radius,
            elevation_deg: 15.0,
            azimuth_deg: azimuth,
            fov_y_deg: cfg.camera.fov_y,
            height: cfg.camera.resolution,
            width: cfg.camera.resolution,
        })
        .collect()
}

fn metrics_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

struct ArtifactWriter {
    out_dir: PathBuf,
    checksums: BTreeMap<String, String>,
    unchecksummed: Vec<String>,
}

impl ArtifactWriter {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        io::atomic_write(&self.out_dir.join(rel), bytes)?;
        self.checksums.insert(rel.to_string(), io::sha256_hex(bytes));
        Ok(())
    }

    fn write_unchecksummed(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        io::atomic_write(&self.out_dir.join(rel), bytes)?;
        self.unchecksummed.push(rel.to_string());
        Ok(())
    }
}

fn write_render_set(
    writer: &mut ArtifactWriter,
    mesh: &SurfaceMesh,
    albedo: Option<(&AlbedoField, crate::optimize::config::LightMode)>,
    poses: &[CameraPose],
) -> Result<()> {
    for (i, pose) in poses.iter().enumerate() {
        let (nm, _) = rasterize_normals(mesh, pose);
        writer.write(
            &format!("renders/normal_{i:02}.png"),
            &io::png_rgb_bytes(&nm.pixels)?,
        )?;
        writer.write(
            &format!("renders/normal_{i:02}_mask.png"),
            &io::png_mask_bytes(&nm.mask)?,
        )?;
        if let Some((field, light_mode)) = albedo {
            let light = light_mode.direction(pose.position());
            let (img, _, _) = rasterize_color(mesh, field, pose, light)?;
            writer.write(
                &format!("renders/color_{i:02}.png"),
                &io::png_rgb_bytes(&img)?,
            )?;
        }
    }
    Ok(())
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Mesh(format!("manifest encode: {e}")))?;
    io::atomic_write(path, json.as_bytes())
}

/// Execute fit, geometry, and appearance, writing every artifact into the
/// config's output directory. On stage failure the manifest records the
/// error and the failure is returned.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    let out_dir = cfg.out_dir();
    match run_pipeline_inner(cfg, &out_dir) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            let manifest = Manifest {
                status: "failed".into(),
                error: Some(e.to_string()),
                seed: cfg.seed,
                config: cfg.clone(),
                artifacts: BTreeMap::new(),
                unchecksummed: Vec::new(),
            };
            // best effort: the failure itself is what we report
            let _ = write_manifest(&out_dir.join("manifest.json"), &manifest);
            Err(e)
        }
    }
}

fn run_pipeline_inner(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let scene = crate::field::parse_scene_file(&cfg.scene_path())?;
    let grid = TetGrid::new(cfg.grid_resolution)?;
    let mut writer = ArtifactWriter {
        out_dir: out_dir.to_path_buf(),
        checksums: BTreeMap::new(),
        unchecksummed: Vec::new(),
    };

    // stage 1: prior fitting
    let fit_cfg = FitConfig {
        iterations: cfg.fit.iterations,
        lr_initial: cfg.fit.lr_initial,
        lr_final: cfg.fit.lr_final,
        lambda_def: cfg.fit.lambda_def,
        counts: cfg.fit.counts(),
        band: cfg.fit.band,
        seed: cfg.seed,
    };
    let (fitted, fit_report) = fit_prior(&grid, &scene, &fit_cfg)?;
    let coarse_mesh = marching_tets(&grid, &fitted);
    writer.write("coarse.obj", io::mesh_to_obj(&coarse_mesh).as_bytes())?;
    writer.write(
        "fit_report.json",
        serde_json::to_string_pretty(&fit_report)
            .map_err(|e| Error::Mesh(format!("fit report encode: {e}")))?
            .as_bytes(),
    )?;

    // score-side machinery shared by stages 2 and 3
    let schedule = Arc::new(make_schedule(
        cfg.score.steps,
        cfg.score.beta_start,
        cfg.score.beta_end,
    )?);
    let provider = PointMassProvider::new(schedule.clone());
    let target_scene = crate::field::parse_scene_file(&cfg.target_scene_path())?;
    let target_params = target_field(&grid, &target_scene, cfg.target_scale());
    let target_mesh = marching_tets(&grid, &target_params);
    let encoder = build_encoder(cfg);
    let weight = cfg.score.weight_schedule()?;
    let timesteps = cfg.score.timestep_strategy()?;

    // stage 2: geometry lifting
    let normal_conditions = MeshNormalConditions {
        mesh: target_mesh.clone(),
    };
    let env = StageEnv {
        grid: &grid,
        camera: &cfg.camera,
        provider: &provider,
        conditions: &normal_conditions,
        schedule: &schedule,
        cfg_scale: cfg.score.cfg_scale,
        weight,
        timesteps,
    };
    let geometry = run_geometry_stage(
        &env,
        &cfg.guidance.guidance_config(),
        encoder.as_ref(),
        &fitted,
        &cfg.geometry,
        cfg.seed.wrapping_add(1),
    )?;
    let final_mesh = marching_tets(&grid, &geometry.params);
    writer.write("final.obj", io::mesh_to_obj(&final_mesh).as_bytes())?;

    // stage 3: appearance on the frozen geometry
    let mut all_metrics = geometry.metrics.clone();
    let mut albedo: Option<AlbedoField> = None;
    if cfg.appearance.iterations > 0 {
        let color_conditions = MeshColorConditions {
            mesh: final_mesh.clone(),
            albedo: target_albedo(&grid, cfg.appearance.target),
            light: cfg.appearance.light,
        };
        let env_app = StageEnv {
            conditions: &color_conditions,
            ..env
        };
        let appearance = run_appearance_stage(
            &env_app,
            &geometry.params,
            AlbedoField::constant(grid.vertex_count(), [0.5; 3]),
            cfg.appearance.light,
            cfg.appearance.iterations,
            cfg.appearance.lr_initial,
            cfg.appearance.lr_final,
            cfg.seed.wrapping_add(2),
        )?;
        all_metrics.extend_from_slice(&appearance.metrics);
        albedo = Some(appearance.albedo);
    }

    // artifacts: params snapshot, sample renders, metrics, manifest
    let snapshot = io::FieldSnapshot::capture(&grid, &geometry.params, albedo.as_ref());
    writer.write(
        "fields.json",
        serde_json::to_string(&snapshot)
            .map_err(|e| Error::Mesh(format!("snapshot encode: {e}")))?
            .as_bytes(),
    )?;
    let poses = sample_poses(cfg);
    write_render_set(
        &mut writer,
        &final_mesh,
        albedo.as_ref().map(|a| (a, cfg.appearance.light)),
        &poses,
    )?;
    writer.write_unchecksummed("metrics.jsonl", metrics_jsonl(&all_metrics).as_bytes())?;

    let manifest = Manifest {
        status: "ok".into(),
        error: None,
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts: writer.checksums,
        unchecksummed: writer.unchecksummed,
    };
    write_manifest(&out_dir.join("manifest.json"), &manifest)?;

    let final_l_struc = geometry.metrics.last().map(|m| m.l_struc);
    let final_l_sem = geometry.metrics.last().map(|m| m.l_sem);
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        fit_report,
        geometry_iterations: cfg.geometry.iterations,
        appearance_iterations: cfg.appearance.iterations,
        final_l_struc,
        final_l_sem,
    })
}
