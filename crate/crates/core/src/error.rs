use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("range image pixel {pixel} is valid but {reason}")]
    BrokenBackReference { pixel: usize, reason: &'static str },

    #[error("probability distribution at pixel {pixel} sums to {sum}")]
    NotNormalized { pixel: usize, sum: f64 },

    #[error("heatmap prediction {value} at voxel {voxel} is outside (0, 1)")]
    PredictionOutOfRange { voxel: usize, value: f64 },

    #[error("positive voxel {voxel} is not owned by any box")]
    OrphanPositive { voxel: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("object placement failed for frame {frame} after {attempts} attempts")]
    Placement { frame: u64, attempts: usize },

    #[error("cannot sample from an empty {0} subset")]
    EmptySubset(&'static str),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64, trace: Vec<(usize, f64)> },

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("malformed record: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
