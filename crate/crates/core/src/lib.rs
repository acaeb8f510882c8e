//! Training-free attention interventions for style-aligned, subject-consistent
//! batch generation, run on a small seeded latent denoiser.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: matrices, attention, AdaIN, Gram statistics and the binary
//!   tensor format
//! - [`correspondence`]: subject masks and nearest-neighbour patch matching
//! - [`schemes`]: the attention interventions and the hook that runs them
//! - [`diffusion`]: the toy denoiser and its guided sampler
//! - [`pipeline`]: the three-phase procedure, its run tree and experiments
//! - [`metrics`]: style-distance and subject-consistency proxies

pub mod correspondence;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod schemes;
pub mod tensor;

pub use correspondence::{CorrespondenceMap, PatchMatch, SearchSpace, SubjectMask};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use pipeline::{RunConfig, ValueStore};
pub use schemes::{QkInject, Scheme, SchemeOptions, SchemeSpec, StepWindow};
pub use tensor::{FeatureTensor, Matrix};
