use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("point at infinity: homogeneous depth {0:e} is too close to zero")]
    PointAtInfinity(f64),

    #[error("degenerate ray geometry: condition number {condition:e} exceeds bound {bound:e}")]
    DegenerateRay { condition: f64, bound: f64 },

    #[error("insufficient phase steps: need at least 3, got {0}")]
    InsufficientSteps(usize),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate correspondence set: {0}")]
    DegenerateCorrespondence(String),

    #[error("insufficient overlap: {found} usable points, need {required}")]
    InsufficientOverlap { found: usize, required: usize },

    #[error("insufficient matches: {found}, need {required}")]
    InsufficientMatches { found: usize, required: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("inconsistent solution: {0}")]
    InconsistentSolution(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{stage} failed at frame {frame}: {source}")]
    Stage {
        stage: &'static str,
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Algorithm,
}

impl Error {
    pub fn at_stage(self, stage: &'static str, frame: usize) -> Self {
        Error::Stage {
            stage,
            frame,
            source: Box::new(self),
        }
    }

    /// The underlying error, without stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Calibration(_) => ErrorKind::Config,
            Error::Data(_) | Error::Io { .. } | Error::Input(_) => ErrorKind::Data,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Algorithm,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 algorithm degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Algorithm => 4,
        }
    }
}
