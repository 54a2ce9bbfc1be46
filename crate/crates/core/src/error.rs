use std::path::PathBuf;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate fiducials: {0}")]
    DegenerateFiducials(String),
    #[error("invalid photo {id}: {reason}")]
    InvalidPhoto { id: String, reason: String },
    #[error("cluster {0} is empty")]
    EmptyCluster(i32),
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("missing image file {}", .0.display())]
    MissingImage(PathBuf),
    #[error("collection has no frontal (0 degree) cluster")]
    MissingFrontalCluster,
    #[error("nothing projects into the image")]
    EmptyProjection,
    #[error("cluster has {found} photos, at least {required} are required")]
    TooFewPhotos { found: usize, required: usize },
    #[error("insufficient lighting variation: sigma4/sigma1 = {ratio:.3e}")]
    DegenerateLighting { ratio: f64 },
    #[error("overlap of {found} pixels is below the required {required}")]
    InsufficientOverlap { found: usize, required: usize },
    #[error("estimated raw normals do not span rank 4")]
    RankDeficientNormals,
    #[error("transform is singular or ill-conditioned (condition {condition:.3e})")]
    SingularTransform { condition: f64 },
    #[error("normal field has no valid pixels")]
    NoValidPixels,
    #[error("least-squares solver stalled at relative residual {residual:.3e} after {iterations} iterations")]
    SolverDivergence { residual: f64, iterations: usize },
    #[error("blend reference region is empty")]
    EmptyRegion,
    #[error("cannot grow cluster {target}: neighbor {neighbor} has not been reconstructed")]
    NeighborNotCompleted { target: i32, neighbor: i32 },
    #[error("cluster {0} is not part of the collection")]
    UnknownCluster(i32),
    #[error("cluster {0} was already reconstructed")]
    AlreadyCompleted(i32),
    #[error("no mutually valid pixels")]
    NoValidOverlap,
    #[error("estimate is constant; scale fit is degenerate")]
    DegenerateFit,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable variant name, used in run logs, CLI messages and ablation tables.
    pub fn name(&self) -> &'static str {
        match self {
            Error::DegenerateFiducials(_) => "DegenerateFiducials",
            Error::InvalidPhoto { .. } => "InvalidPhoto",
            Error::EmptyCluster(_) => "EmptyCluster",
            Error::ManifestParse(_) => "ManifestParseError",
            Error::MissingImage(_) => "MissingImage",
            Error::MissingFrontalCluster => "MissingFrontalCluster",
            Error::EmptyProjection => "EmptyProjection",
            Error::TooFewPhotos { .. } => "TooFewPhotos",
            Error::DegenerateLighting { .. } => "DegenerateLighting",
            Error::InsufficientOverlap { .. } => "InsufficientOverlap",
            Error::RankDeficientNormals => "RankDeficientNormals",
            Error::SingularTransform { .. } => "SingularTransform",
            Error::NoValidPixels => "NoValidPixels",
            Error::SolverDivergence { .. } => "SolverDivergence",
            Error::EmptyRegion => "EmptyRegion",
            Error::NeighborNotCompleted { .. } => "NeighborNotCompleted",
            Error::UnknownCluster(_) => "UnknownCluster",
            Error::AlreadyCompleted(_) => "AlreadyCompleted",
            Error::NoValidOverlap => "NoValidOverlap",
            Error::DegenerateFit => "DegenerateFit",
            Error::InvalidMesh(_) => "InvalidMesh",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Image(_) => "ImageError",
            Error::Json(_) => "JsonError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
