//! The deformable tetrahedral SDF field and its analytic coarse prior:
//! scene oracle, lattice, sampling, and prior fitting.

pub mod fit;
pub mod grid;
pub mod sample;
pub mod scene;

pub use fit::{fit_prior, held_out_mae, prior_fit_loss, FieldGrads, FitConfig, FitReport};
pub use grid::{
    field_eval, signed_volume, tet_edge_pairs, DeformedGrid, FieldParams, PointInTet, TetGrid,
    OFFSET_CAP_FACTOR,
};
pub use sample::{sample_prior_points, PointSample, SampleCounts};
pub use scene::{
    parse_scene_file, parse_scene_str, prior_sdf, prior_sdf_gradient, CsgNode, PriorScene,
    ScaledScene,
};
