use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene error: {0}")]
    Scene(String),

    #[error("config error at key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("surface projection did not converge for sample {index} (degenerate scene?)")]
    SurfaceProjection { index: usize },

    #[error("sample {index} at ({x}, {y}, {z}) lies outside every tetrahedron")]
    SampleOutsideGrid { index: usize, x: f64, y: f64, z: f64 },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("non-finite {what} in parameter block `{block}`")]
    NonFinite { what: &'static str, block: String },

    #[error("stage `{stage}` failed at iteration {iteration}: {message}")]
    StageFailure {
        stage: String,
        iteration: usize,
        message: String,
    },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
