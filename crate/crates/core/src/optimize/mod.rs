//! Adam optimizer and the three-stage pipeline: prior fitting, geometry
//! lifting, and appearance optimization.

pub mod adam;
pub mod config;
pub mod pipeline;
pub mod stages;

pub use adam::{AdamHyper, AdamState, LrSchedule};
pub use config::{
    AlbedoTarget, AppearanceSection, CameraConfig, EncoderKind, FitSection, GeometrySection,
    GuidanceSection, LightMode, RunConfig, ScoreSection,
};
pub use pipeline::{build_encoder, run_pipeline, target_albedo, target_field, Manifest, RunSummary};
pub use stages::{
    geometry_loss, noise_image, run_appearance_stage, run_geometry_stage, AppearanceStageResult,
    ConditionSource, GeometryDiagnostics, GeometryStageResult, MeshColorConditions,
    MeshNormalConditions, MetricsRecord, ScoreContext, StageEnv,
};
