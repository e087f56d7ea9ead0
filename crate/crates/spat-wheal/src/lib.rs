//! Wheal detection for multi-illumination skin-prick imagery.
//!
//! A skin-prick test case is captured as a stack of 32 photographs of the
//! same forearm, each lit from a different direction, plus one uniformly lit
//! full-light image. Raised wheals cast distinct shadow lines at their edges
//! under directional light, which makes them far easier to delineate than in
//! a single conventionally lit photograph.
//!
//! The pipeline has two steps:
//!
//! 1. **Pixel classification** ([`unet`], [`tensor`], [`train`]): a U-Net
//!    consumes the 32 images concatenated along the channel dimension
//!    (`32 x 3 = 96` channels) and emits a per-pixel wheal probability map.
//!    The tensor engine is a small dense f32/f64 implementation with
//!    reverse-mode autodiff — just the operations this network needs.
//! 2. **Algorithmic detection** ([`detect`]): the probability map is
//!    thresholded, split into connected components, registered to the twelve
//!    known prick locations with a rigid-transform grid search, and greedily
//!    matched one wheal per prick.
//!
//! Around the two steps: [`synth`] generates deterministic synthetic cases
//! (lit height-field renderings with polygon ground truth) so the whole
//! pipeline runs at desk scale, [`data`] defines the on-disk dataset format,
//! [`metrics`] scores results (Dice, per-wheal IoU, accuracy-at-threshold),
//! and [`saliency`] attributes model sensitivity to each lighting condition.
//!
//! Start with the `examples/` directory — one runnable example per pipeline
//! capability — or the `spat` binary, which wires the stages into
//! reproducible runs.

pub mod cli;
pub mod data;
pub mod detect;
pub mod metrics;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unet;

/// Number of directional lighting conditions in one capture.
pub const DIRECTIONAL_IMAGES: usize = 32;

/// Number of pricks applied per test.
pub const PRICK_COUNT: usize = 12;

/// Crate-wide error type; each stage keeps its own error enum and this
/// aggregates them for pipeline-level callers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] unet::ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Detect(#[from] detect::DetectError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Saliency(#[from] saliency::SaliencyError),
    #[error("{0}")]
    Usage(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for usage/input problems, 3 for internal
    /// invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Tensor(_) | Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
