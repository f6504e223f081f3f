//! Channel-adaptive transmission of Gaussian latents over OFDM.
//!
//! The crate covers the full chain from a per-element Gaussian model
//! `y_i ~ N(μ_i, σ_i²)` to bits on subcarriers and back:
//!
//! * [`numerics`]: standard-normal CDF, Q-function and truncated moments.
//! * [`quantizer`]: channel-optimized scalar quantizers over binary
//!   symmetric channels.
//! * [`library`]: an offline grid of quantizers over bit depth and BER target.
//! * [`modem`]: Gray-labeled square QAM and its BER approximation.
//! * [`channel`]: tapped-delay-line fading and the per-subcarrier link.
//! * [`allocator`]: bit allocation, power/modulation loading, BER-target
//!   selection and bit refinement.
//! * [`simulator`]: Monte Carlo harness tying everything together.

pub mod allocator;
pub mod channel;
pub mod digest;
pub mod error;
pub mod library;
pub mod modem;
pub mod numerics;
pub mod quantizer;
pub mod rng;
pub mod simulator;

pub use allocator::{optimize, AllocationPlan, AllocatorConfig, LatentStats, OperatingPoint};
pub use channel::{ChannelRealization, TapProfile};
pub use error::{Error, Result};
pub use library::{EpsilonGrid, QuantizerLibrary};
pub use modem::ModulationOrder;
pub use quantizer::{BscVector, Codeword, DesignConfig, ScalarQuantizer};
pub use simulator::{ExperimentConfig, ExperimentReport, SyntheticSourceConfig, TrialResult};

/// Version string embedded in every emitted document.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
