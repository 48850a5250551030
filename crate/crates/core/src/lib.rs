//! Late-stage noise-delta caching for diffusion samplers.
//!
//! Calibration collects per-timestep cosine similarity and norm ratio of
//! consecutive noise-prediction deltas; a deviation-penalised window search
//! picks where to skip model calls; skipped steps are filled by scaling the
//! previous delta with the calibrated ratio. Residual and magnitude caching
//! baselines, an exact Gaussian-mixture denoiser, fidelity metrics and a binary
//! trace format round out the toolkit.

pub mod backends;
pub mod calibration;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trace;

pub use backends::{DenoiserBackend, Stream};
pub use calibration::{calibrate, table_merge, CalibrationTable, Prompt};
pub use error::{Error, Result};
pub use policy::{PolicyRunReport, Sampling, SkipPlan, WindowParams};
pub use schedule::{make_schedule, NoiseSchedule, SamplerMode, ScheduleKind};
pub use tensor::{Delta, Latent, NoisePred, Tensor};
pub use trace::{read_trace, write_trace, Trace};
