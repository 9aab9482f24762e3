//! Flow-matching sampling laboratory: samplers, predictor-corrector
//! inversion, region-adaptive editing and the fields they run on.

pub mod checkpoint;
pub mod edit;
pub mod error;
pub mod experiments;
pub mod field;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod shapes;
pub mod stats;
pub mod step;
pub mod tensor;

pub use error::{Error, Result};
pub use field::{Condition, VelocityField};
pub use step::{StepKind, StepRule};
pub use tensor::{Latent, SeededRng, Shape, SpatialMap, TimeGrid};
