//! Noise predictors that stand in for a trained denoiser.

mod geometric;
mod mixture;
mod replay;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Latent, NoisePred};

pub use geometric::{geometric_predict, GeometricBackend};
pub use mixture::{
    guided_predict, mixture_predict, GuidanceSpec, MixtureBackend, MixtureComponent, MixtureFamily, MixtureModel,
};
pub use replay::{trace_predict, TraceBackend};

/// Conditioning stream of a classifier-free-guided model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Cond,
    Uncond,
    Guided,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Cond, Stream::Uncond, Stream::Guided];

    pub fn code(self) -> u8 {
        match self {
            Stream::Cond => 0,
            Stream::Uncond => 1,
            Stream::Guided => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Stream> {
        Stream::ALL.get(code as usize).copied()
    }

    pub fn bit(self) -> u8 {
        1 << self.code()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Cond => "cond",
            Stream::Uncond => "uncond",
            Stream::Guided => "guided",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Thread-safe count of `predict` calls.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// A deterministic noise predictor `eps(x, t)`.
///
/// Implementations must count every `predict` call exactly once, successful or not.
pub trait DenoiserBackend: Send + Sync {
    fn id(&self) -> String;

    fn shape(&self) -> &[usize];

    /// Streams this backend can answer for, in canonical order.
    fn streams(&self) -> Vec<Stream>;

    fn predict(&self, x: &Latent, t: usize, stream: Stream) -> Result<NoisePred>;

    fn calls(&self) -> u64;

    fn reset_calls(&self);
}
