//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical kernels, the model layer, pruning and
/// restoration.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up for the requested operation.
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },
    /// Convolution or pooling geometry is invalid: the stride does not divide
    /// the padded extent exactly, or the output would be empty.
    Geometry { detail: String },
    /// A value that must be finite is NaN or infinite.
    NonFinite { context: &'static str },
    /// Matrix handed to the SPD solver is not symmetric.
    AsymmetricInput { row: usize, col: usize },
    /// Cholesky factorization hit a non-positive pivot. With a zero ridge
    /// weight this signals a rank-deficient basis; set `lambda2 > 0`.
    NotPositiveDefinite { pivot: usize },
    /// Batch-norm parameters are invalid (length mismatch or sigma <= 0).
    InvalidBatchNorm { detail: String },
    /// Unknown synthetic architecture name.
    UnknownArch(String),
    /// Layer has too few filters to score.
    DegenerateLayer { filters: usize },
    /// A selection removes every filter of a layer.
    AllPruned,
    /// Plan indices or shapes do not match the model.
    PlanShapeMismatch { layer: usize, detail: String },
    /// The planned layer's consumer lies across a residual boundary.
    IllegalResidualPrune { layer: usize },
    /// The pruned filter's own batch-norm scale or deviation is too close to
    /// zero for the BN-scaled basis; callers fall back to the unscaled basis.
    DegenerateTarget { filter: usize },
    /// Requested tap is not present in the record.
    MissingTap { layer: usize },
    /// Delivery map holds no pruned rows.
    EmptyDelivery,
    /// Hyperparameter outside its documented domain.
    InvalidHyperparams { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Self::Geometry { detail } => write!(f, "invalid geometry: {detail}"),
            Self::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Self::AsymmetricInput { row, col } => {
                write!(f, "matrix is not symmetric at ({row}, {col})")
            }
            Self::NotPositiveDefinite { pivot } => write!(
                f,
                "matrix is not positive definite (pivot {pivot}); \
                 with lambda2 = 0 the basis is rank-deficient, set lambda2 > 0"
            ),
            Self::InvalidBatchNorm { detail } => write!(f, "invalid batch-norm: {detail}"),
            Self::UnknownArch(name) => write!(f, "unknown architecture: {name}"),
            Self::DegenerateLayer { filters } => {
                write!(f, "layer has {filters} filter(s), need at least 2")
            }
            Self::AllPruned => write!(f, "selection prunes every filter of the layer"),
            Self::PlanShapeMismatch { layer, detail } => {
                write!(f, "plan does not match model at layer {layer}: {detail}")
            }
            Self::IllegalResidualPrune { layer } => write!(
                f,
                "layer {layer} feeds a residual boundary and cannot be pruned"
            ),
            Self::DegenerateTarget { filter } => write!(
                f,
                "batch-norm parameters of pruned filter {filter} are near zero"
            ),
            Self::MissingTap { layer } => write!(f, "no tap captured for layer {layer}"),
            Self::EmptyDelivery => write!(f, "delivery map holds no pruned rows"),
            Self::InvalidHyperparams { detail } => write!(f, "invalid hyperparameters: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
