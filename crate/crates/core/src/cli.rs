//! Command-line front end: config loading, subcommands, and exporters.
//!
//! Exit codes: 0 success, 1 config/input errors (the message names the
//! offending key or path), 2 stage failures.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::field::{fit_prior, FitConfig, TetGrid};
use crate::io;
use crate::optimize::{run_pipeline, LightMode, RunConfig};
use crate::render::{rasterize_color, rasterize_normals, CameraPose};
use crate::tessellate::marching_tets;
use crate::verify;
use crate::Error;

#[derive(Parser)]
#[command(
    name = "sherpa-lift",
    about = "Guided mesh lifting: fit a tetrahedral SDF field to a coarse prior, then refine it with score-guided optimization",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline (fit, geometry, appearance).
    Run {
        /// Path to the run configuration file.
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<String>,
    },
    /// Fit the prior only; export coarse.obj and the fit report.
    Fit {
        config: PathBuf,
        #[arg(long)]
        out: Option<String>,
    },
    /// Render normal maps (and color when albedo is present) from an OBJ
    /// file or a run directory.
    Render {
        /// Mesh file (.obj) or run directory containing fields.json.
        input: PathBuf,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        azimuth: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        elevation: f64,
        #[arg(long, default_value_t = 2.5)]
        radius: f64,
        #[arg(long, default_value_t = 45.0)]
        fov: f64,
        #[arg(long, default_value_t = 64)]
        res: usize,
        /// Output directory for the PNG files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a verification suite and print pass/fail per property.
    Check {
        /// One of: mt-table, gradients, filter, schedule, all.
        #[arg(long)]
        suite: String,
    },
}

/// 1 for configuration/input problems, 2 for runtime stage failures.
fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::Config { .. } | Error::Scene(_) | Error::Io { .. } | Error::Mesh(_) => 1,
        _ => 2,
    }
}

fn cmd_run(config_path: &Path, seed: Option<u64>, out: Option<String>) -> i32 {
    let mut cfg = match RunConfig::load(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out = out;
    }
    match run_pipeline(&cfg) {
        Ok(summary) => {
            println!(
                "fit: {} iterations, final_loss={:.6}, held_out_mae={:.6}",
                summary.fit_report.iterations,
                summary.fit_report.final_loss,
                summary.fit_report.held_out_mae
            );
            println!(
                "geometry: {} iterations, final l_struc={:.6}, l_sem={:.6}",
                summary.geometry_iterations,
                summary.final_l_struc.unwrap_or(0.0),
                summary.final_l_sem.unwrap_or(0.0)
            );
            println!(
                "appearance: {} iterations",
                summary.appearance_iterations
            );
            println!("run directory: {}", summary.out_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn cmd_fit(config_path: &Path, out: Option<String>) -> i32 {
    let mut cfg = match RunConfig::load(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Some(out) = out {
        cfg.out = out;
    }
    let run = || -> crate::Result<()> {
        let scene = crate::field::parse_scene_file(&cfg.scene_path())?;
        let grid = TetGrid::new(cfg.grid_resolution)?;
        let fit_cfg = FitConfig {
            iterations: cfg.fit.iterations,
            lr_initial: cfg.fit.lr_initial,
            lr_final: cfg.fit.lr_final,
            lambda_def: cfg.fit.lambda_def,
            counts: cfg.fit.counts(),
            band: cfg.fit.band,
            seed: cfg.seed,
        };
        let (params, report) = fit_prior(&grid, &scene, &fit_cfg)?;
        let mesh = marching_tets(&grid, &params);
        let out_dir = cfg.out_dir();
        io::write_obj(&out_dir.join("coarse.obj"), &mesh)?;
        let report_json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Mesh(format!("fit report encode: {e}")))?;
        io::atomic_write(&out_dir.join("fit_report.json"), report_json.as_bytes())?;
        let snapshot = io::FieldSnapshot::capture(&grid, &params, None);
        io::write_snapshot(&out_dir.join("fields.json"), &snapshot)?;
        println!(
            "fit: {} iterations, final_loss={:.6}, held_out_mae={:.6}",
            report.iterations, report.final_loss, report.held_out_mae
        );
        println!("fit outputs: {}", out_dir.display());
        Ok(())
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    input: &Path,
    azimuth: f64,
    elevation: f64,
    radius: f64,
    fov: f64,
    res: usize,
    out: &Path,
) -> i32 {
    let run = || -> crate::Result<()> {
        let camera = CameraPose {
            radius,
            elevation_deg: elevation,
            azimuth_deg: azimuth,
            fov_y_deg: fov,
            height: res,
            width: res,
        };
        let (mesh, albedo) = if input.is_dir() {
            let snapshot = io::read_snapshot(&input.join("fields.json"))?;
            let (grid, params, albedo) = snapshot.restore()?;
            (marching_tets(&grid, &params), albedo)
        } else {
            (io::read_obj(input)?, None)
        };
        let (nm, _) = rasterize_normals(&mesh, &camera);
        io::write_png_rgb(&out.join("render_normal.png"), &nm.pixels)?;
        io::write_png_mask(&out.join("render_mask.png"), &nm.mask)?;
        if let Some(albedo) = albedo {
            let light = LightMode::Headlight.direction(camera.position());
            let (img, _, _) = rasterize_color(&mesh, &albedo, &camera, light)?;
            io::write_png_rgb(&out.join("render_color.png"), &img)?;
        }
        println!("rendered {} at azimuth {azimuth}, elevation {elevation}", input.display());
        Ok(())
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_check(suite: &str) -> i32 {
    let suites: Vec<&str> = if suite == "all" {
        verify::SUITES.to_vec()
    } else {
        vec![suite]
    };
    let mut all_passed = true;
    for name in suites {
        match verify::run_suite(name) {
            Ok(results) => {
                for r in &results {
                    let tag = if r.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {}: {}", r.name, r.detail);
                    all_passed &= r.passed;
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        }
    }
    if all_passed {
        0
    } else {
        1
    }
}

/// Cap rayon's worker count from SHERPA_LIFT_THREADS (0 = auto).
fn configure_threads() {
    if let Ok(raw) = std::env::var("SHERPA_LIFT_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        } else {
            eprintln!("warning: SHERPA_LIFT_THREADS is not an integer; using auto");
        }
    }
}

pub fn main() -> i32 {
    configure_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out),
        Command::Fit { config, out } => cmd_fit(&config, out),
        Command::Render {
            input,
            azimuth,
            elevation,
            radius,
            fov,
            res,
            out,
        } => cmd_render(&input, azimuth, elevation, radius, fov, res, &out),
        Command::Check { suite } => cmd_check(&suite),
    }
}
