//! Numerical toolbox for time-discounted integral incremental
//! input/output-to-state stability (i-iIOSS).

// `!(x >= 0.0)` rejects NaN along with negatives; kernels index several
// arrays in lockstep
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod comparison;
pub mod detectability;
pub mod error;
pub mod io;
pub mod observer;
pub mod optimize;
mod quadrature;
pub mod signals;
pub mod system;

pub use comparison::{ComparisonFunction, FunctionClass, OsgoodIntegral, OsgoodReport};
pub use detectability::{
    certificate_from_lyapunov, IossCertificate, LyapCertificate, ResidualSeries, SamplerConfig, SearchConfig,
    TrajectoryPairScenario,
};
pub use error::{Error, Result};
pub use observer::{luenberger, MeasuredOutput, Observer, ObserverScenario, RgasCertificate};
pub use signals::{concat, DiscountedAccumulator, VectorSignal};
pub use system::{registry_get, simulate, Bounds, LinearModel, SystemModel, Trajectory};
