//! Run configuration: a flat key-value text format with section prefixes.
//! Unknown keys are hard errors so typos cannot silently fall back to
//! defaults.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::field::SampleCounts;
use crate::guidance::GuidanceConfig;
use crate::score::{TimestepStrategy, WeightSchedule};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Serialize)]
pub struct CameraConfig {
    pub batch: usize,
    pub intervals: usize,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub resolution: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            batch: 2,
            intervals: 4,
            elevation_min: -30.0,
            elevation_max: 30.0,
            radius: 2.5,
            fov_y: 45.0,
            resolution: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSection {
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lambda_def: f64,
    pub surface_samples: usize,
    pub near_samples: usize,
    pub uniform_samples: usize,
    pub band: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            iterations: 500,
            lr_initial: 0.03,
            lr_final: 0.01,
            lambda_def: 0.1,
            surface_samples: 1024,
            near_samples: 1024,
            uniform_samples: 8192,
            band: 0.1,
        }
    }
}

impl FitSection {
    pub fn counts(&self) -> SampleCounts {
        SampleCounts {
            surface: self.surface_samples,
            near: self.near_samples,
            uniform: self.uniform_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub enum EncoderKind {
    PatchStats,
    RandomProjection,
}

#[derive(Debug, Clone, Serialize)]
pub struct GuidanceSection {
    pub lambda_struc: f64,
    pub lambda_sem: f64,
    pub beta: f64,
    pub m: usize,
    pub sigma_blur: f64,
    pub kernel_radius: usize,
    pub encoder: EncoderKind,
    pub patches: usize,
    pub feature_dim: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            lambda_struc: 10.0,
            lambda_sem: 30.0,
            beta: 0.5,
            // desk-scale threshold: full guidance for the first third of a
            // 300-iteration stage
            m: 100,
            sigma_blur: 1.0,
            kernel_radius: 3,
            encoder: EncoderKind::PatchStats,
            patches: 4,
            feature_dim: 48,
        }
    }
}

impl GuidanceSection {
    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            lambda_struc: self.lambda_struc,
            lambda_sem: self.lambda_sem,
            beta: self.beta,
            m: self.m,
            sigma_blur: self.sigma_blur,
            kernel_radius: self.kernel_radius,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cfg_scale: f64,
    pub weight: String,
    pub timesteps: String,
    /// Scene file rendered by the analytic provider as the conditioning
    /// target; empty means the run's own scene.
    pub target_scene: String,
    pub target_scale: [f64; 3],
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            cfg_scale: 50.0,
            weight: "sigma-squared".into(),
            timesteps: "linear-descending".into(),
            target_scene: String::new(),
            target_scale: [1.0, 1.0, 1.0],
        }
    }
}

impl ScoreSection {
    pub fn weight_schedule(&self) -> Result<WeightSchedule> {
        parse_weight(&self.weight)
    }

    pub fn timestep_strategy(&self) -> Result<TimestepStrategy> {
        match self.timesteps.as_str() {
            "linear-descending" => Ok(TimestepStrategy::LinearDescending),
            "uniform-random" => Ok(TimestepStrategy::UniformRandom),
            other => Err(Error::Config {
                key: "score.timesteps".into(),
                message: format!("unknown strategy `{other}`"),
            }),
        }
    }
}

fn parse_weight(text: &str) -> Result<WeightSchedule> {
    let err = |m: String| Error::Config {
        key: "score.weight".into(),
        message: m,
    };
    if text == "sigma-squared" {
        return Ok(WeightSchedule::SigmaSquared);
    }
    if let Some(rest) = text.strip_prefix("constant:") {
        let c: f64 = rest.parse().map_err(|_| err(format!("bad constant `{rest}`")))?;
        return Ok(WeightSchedule::Constant(c));
    }
    if let Some(rest) = text.strip_prefix("ramp:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(err("ramp wants ramp:<t_lo>:<t_hi>:<scale>".into()));
        }
        return Ok(WeightSchedule::TruncatedRamp {
            t_lo: parts[0].parse().map_err(|_| err("bad t_lo".into()))?,
            t_hi: parts[1].parse().map_err(|_| err("bad t_hi".into()))?,
            scale: parts[2].parse().map_err(|_| err("bad scale".into()))?,
        });
    }
    Err(err(format!(
        "unknown weight `{text}` (sigma-squared | constant:<c> | ramp:<lo>:<hi>:<scale>)"
    )))
}

#[derive(Debug, Clone, Serialize)]
pub struct GeometrySection {
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub snapshot_interval: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            iterations: 300,
            lr_initial: 1e-3,
            lr_final: 5e-4,
            snapshot_interval: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub enum AlbedoTarget {
    /// Position-encoded color (p+1)/2: fully recoverable and nontrivial.
    Position,
    Constant([f64; 3]),
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub enum LightMode {
    /// Light from the camera position; every front face is lit.
    Headlight,
    Fixed([f64; 3]),
}

impl LightMode {
    pub fn direction(&self, camera_position: Vec3) -> Vec3 {
        match self {
            LightMode::Headlight => camera_position.normalize(),
            LightMode::Fixed(v) => Vec3::new(v[0], v[1], v[2]).normalize(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AppearanceSection {
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub target: AlbedoTarget,
    pub light: LightMode,
}

impl Default for AppearanceSection {
    fn default() -> Self {
        AppearanceSection {
            iterations: 300,
            lr_initial: 1e-2,
            lr_final: 5e-3,
            target: AlbedoTarget::Position,
            light: LightMode::Headlight,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub scene: String,
    pub out: String,
    pub seed: u64,
    pub grid_resolution: usize,
    pub fit: FitSection,
    pub camera: CameraConfig,
    pub guidance: GuidanceSection,
    pub score: ScoreSection,
    pub geometry: GeometrySection,
    pub appearance: AppearanceSection,
    /// Directory config-relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: String::new(),
            out: "run-out".into(),
            seed: 0,
            grid_resolution: 16,
            fit: FitSection::default(),
            camera: CameraConfig::default(),
            guidance: GuidanceSection::default(),
            score: ScoreSection::default(),
            geometry: GeometrySection::default(),
            appearance: AppearanceSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn scene_path(&self) -> PathBuf {
        self.base_dir.join(&self.scene)
    }

    pub fn target_scene_path(&self) -> PathBuf {
        if self.score.target_scene.is_empty() {
            self.scene_path()
        } else {
            self.base_dir.join(&self.score.target_scene)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.out)
    }

    pub fn target_scale(&self) -> Vec3 {
        Vec3::new(
            self.score.target_scale[0],
            self.score.target_scale[1],
            self.score.target_scale[2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, message: String| Error::Config {
            key: key.into(),
            message,
        };
        if self.scene.is_empty() {
            return Err(cfg_err("scene", "missing scene path".into()));
        }
        if !self.scene_path().is_file() {
            return Err(cfg_err(
                "scene",
                format!("scene file not found: {}", self.scene_path().display()),
            ));
        }
        if !self.score.target_scene.is_empty() && !self.target_scene_path().is_file() {
            return Err(cfg_err(
                "score.target_scene",
                format!("scene file not found: {}", self.target_scene_path().display()),
            ));
        }
        if self.grid_resolution == 0 {
            return Err(cfg_err("grid.resolution", "must be >= 1".into()));
        }
        if self.camera.batch == 0 || self.camera.intervals == 0 {
            return Err(cfg_err("camera", "batch and intervals must be >= 1".into()));
        }
        if self.camera.resolution == 0 {
            return Err(cfg_err("camera.resolution", "must be >= 1".into()));
        }
        if !(self.camera.radius > 0.0) {
            return Err(cfg_err("camera.radius", "must be > 0".into()));
        }
        if !(self.camera.fov_y > 0.0 && self.camera.fov_y < 180.0) {
            return Err(cfg_err("camera.fov_y", "must be in (0, 180)".into()));
        }
        if self.camera.elevation_min < -90.0
            || self.camera.elevation_max > 90.0
            || self.camera.elevation_min > self.camera.elevation_max
        {
            return Err(cfg_err("camera.elevation", "need -90 <= min <= max <= 90".into()));
        }
        if !(self.fit.band > 0.0) {
            return Err(cfg_err("fit.band", "must be > 0".into()));
        }
        if self.score.target_scale.iter().any(|&s| !(s > 0.0)) {
            return Err(cfg_err("score.target_scale", "components must be > 0".into()));
        }
        if !(self.score.cfg_scale >= 0.0) {
            return Err(cfg_err("score.cfg_scale", "must be >= 0".into()));
        }
        self.guidance.guidance_config().validate()?;
        self.score.weight_schedule()?.validate()?;
        self.score.timestep_strategy()?;
        crate::score::make_schedule(self.score.steps, self.score.beta_start, self.score.beta_end)?;
        if self.guidance.patches == 0 {
            return Err(cfg_err("guidance.patches", "must be >= 1".into()));
        }
        if self.guidance.feature_dim == 0 {
            return Err(cfg_err("guidance.feature_dim", "must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let base_dir = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let mut cfg = parse_config_str(&text)?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        message: format!("expected an unsigned integer, got `{value}`"),
    })
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        message: format!("expected an unsigned integer, got `{value}`"),
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        message: format!("expected a number, got `{value}`"),
    })
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config {
            key: key.into(),
            message: format!("expected x,y,z, got `{value}`"),
        });
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = parse_f64(key, p.trim())?;
    }
    Ok(out)
}

/// Parse the key-value format. Unknown keys are hard errors naming the key.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            key: format!("line {}", lineno + 1),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "scene" => cfg.scene = value.to_string(),
            "out" => cfg.out = value.to_string(),
            "seed" => cfg.seed = parse_u64(key, value)?,
            "grid.resolution" => cfg.grid_resolution = parse_usize(key, value)?,

            "fit.iterations" => cfg.fit.iterations = parse_usize(key, value)?,
            "fit.lr_initial" => cfg.fit.lr_initial = parse_f64(key, value)?,
            "fit.lr_final" => cfg.fit.lr_final = parse_f64(key, value)?,
            "fit.lambda_def" => cfg.fit.lambda_def = parse_f64(key, value)?,
            "fit.surface_samples" => cfg.fit.surface_samples = parse_usize(key, value)?,
            "fit.near_samples" => cfg.fit.near_samples = parse_usize(key, value)?,
            "fit.uniform_samples" => cfg.fit.uniform_samples = parse_usize(key, value)?,
            "fit.band" => cfg.fit.band = parse_f64(key, value)?,

            "camera.batch" => cfg.camera.batch = parse_usize(key, value)?,
            "camera.intervals" => cfg.camera.intervals = parse_usize(key, value)?,
            "camera.elevation_min" => cfg.camera.elevation_min = parse_f64(key, value)?,
            "camera.elevation_max" => cfg.camera.elevation_max = parse_f64(key, value)?,
            "camera.radius" => cfg.camera.radius = parse_f64(key, value)?,
            "camera.fov_y" => cfg.camera.fov_y = parse_f64(key, value)?,
            "camera.resolution" => cfg.camera.resolution = parse_usize(key, value)?,

            "guidance.lambda_struc" => cfg.guidance.lambda_struc = parse_f64(key, value)?,
            "guidance.lambda_sem" => cfg.guidance.lambda_sem = parse_f64(key, value)?,
            "guidance.beta" => cfg.guidance.beta = parse_f64(key, value)?,
            "guidance.m" => cfg.guidance.m = parse_usize(key, value)?,
            "guidance.sigma_blur" => cfg.guidance.sigma_blur = parse_f64(key, value)?,
            "guidance.kernel_radius" => cfg.guidance.kernel_radius = parse_usize(key, value)?,
            "guidance.encoder" => {
                cfg.guidance.encoder = match value {
                    "patch-stats" => EncoderKind::PatchStats,
                    "random-projection" => EncoderKind::RandomProjection,
                    other => {
                        return Err(Error::Config {
                            key: key.into(),
                            message: format!(
                                "unknown encoder `{other}` (patch-stats | random-projection)"
                            ),
                        })
                    }
                }
            }
            "guidance.patches" => cfg.guidance.patches = parse_usize(key, value)?,
            "guidance.feature_dim" => cfg.guidance.feature_dim = parse_usize(key, value)?,

            "score.steps" => cfg.score.steps = parse_usize(key, value)?,
            "score.beta_start" => cfg.score.beta_start = parse_f64(key, value)?,
            "score.beta_end" => cfg.score.beta_end = parse_f64(key, value)?,
            "score.cfg_scale" => cfg.score.cfg_scale = parse_f64(key, value)?,
            "score.weight" => cfg.score.weight = value.to_string(),
            "score.timesteps" => cfg.score.timesteps = value.to_string(),
            "score.target_scene" => cfg.score.target_scene = value.to_string(),
            "score.target_scale" => cfg.score.target_scale = parse_triple(key, value)?,

            "geometry.iterations" => cfg.geometry.iterations = parse_usize(key, value)?,
            "geometry.lr_initial" => cfg.geometry.lr_initial = parse_f64(key, value)?,
            "geometry.lr_final" => cfg.geometry.lr_final = parse_f64(key, value)?,
            "geometry.snapshot_interval" => {
                cfg.geometry.snapshot_interval = parse_usize(key, value)?
            }

            "appearance.iterations" => cfg.appearance.iterations = parse_usize(key, value)?,
            "appearance.lr_initial" => cfg.appearance.lr_initial = parse_f64(key, value)?,
            "appearance.lr_final" => cfg.appearance.lr_final = parse_f64(key, value)?,
            "appearance.target" => {
                cfg.appearance.target = if value == "position" {
                    AlbedoTarget::Position
                } else if let Some(rest) = value.strip_prefix("constant:") {
                    AlbedoTarget::Constant(parse_triple(key, rest)?)
                } else {
                    return Err(Error::Config {
                        key: key.into(),
                        message: format!("unknown target `{value}` (position | constant:r,g,b)"),
                    });
                }
            }
            "appearance.light" => {
                cfg.appearance.light = if value == "headlight" {
                    LightMode::Headlight
                } else if let Some(rest) = value.strip_prefix("fixed:") {
                    LightMode::Fixed(parse_triple(key, rest)?)
                } else {
                    return Err(Error::Config {
                        key: key.into(),
                        message: format!("unknown light `{value}` (headlight | fixed:x,y,z)"),
                    });
                }
            }

            unknown => {
                return Err(Error::Config {
                    key: unknown.into(),
                    message: "unknown configuration key".into(),
                })
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = parse_config_str(
            "scene = s.scene\nseed = 7\ngrid.resolution = 8\nguidance.lambda_struc = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.scene, "s.scene");
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid_resolution, 8);
        assert_eq!(cfg.guidance.lambda_struc, 2.5);
        assert_eq!(cfg.camera.radius, 2.5);
        assert_eq!(cfg.score.cfg_scale, 50.0);
    }

    #[test]
    fn unknown_key_is_a_hard_error_naming_it() {
        let err = parse_config_str("scene = a\nguidance.lambda_strc = 3\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "guidance.lambda_strc"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = parse_config_str("seed = banana\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "seed"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weight_parsing_variants() {
        assert_eq!(parse_weight("sigma-squared").unwrap(), WeightSchedule::SigmaSquared);
        assert_eq!(parse_weight("constant:0").unwrap(), WeightSchedule::Constant(0.0));
        assert_eq!(
            parse_weight("ramp:100:900:2").unwrap(),
            WeightSchedule::TruncatedRamp {
                t_lo: 100,
                t_hi: 900,
                scale: 2.0
            }
        );
        assert!(parse_weight("nope").is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config_str("# hi\n\nscene = x # trailing\n").unwrap();
        assert_eq!(cfg.scene, "x");
    }
}
