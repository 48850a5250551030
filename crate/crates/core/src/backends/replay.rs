use super::{CallCounter, DenoiserBackend, Stream};
use crate::error::{Error, Result};
use crate::tensor::{Latent, NoisePred};
use crate::trace::Trace;

/// Recorded prediction for `(t, stream)`; replay is open-loop so no latent is needed.
pub fn trace_predict(trace: &Trace, t: usize, stream: Stream) -> Result<NoisePred> {
    let record = u32::try_from(t)
        .ok()
        .and_then(|t| trace.record(t, stream))
        .ok_or(Error::TraceIncomplete { t, stream })?;
    NoisePred::from_f32(trace.meta.shape.clone(), &record.eps)
}

/// Replays a recorded trajectory, ignoring the latent it is given.
#[derive(Debug)]
pub struct TraceBackend {
    trace: Trace,
    counter: CallCounter,
}

impl TraceBackend {
    pub fn new(trace: Trace) -> Self {
        Self {
            trace,
            counter: CallCounter::default(),
        }
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }
}

impl DenoiserBackend for TraceBackend {
    fn id(&self) -> String {
        format!("trace:{}", self.trace.meta.model_id)
    }

    fn shape(&self) -> &[usize] {
        &self.trace.meta.shape
    }

    fn streams(&self) -> Vec<Stream> {
        self.trace.meta.streams()
    }

    fn predict(&self, x: &Latent, t: usize, stream: Stream) -> Result<NoisePred> {
        self.counter.bump();
        if x.shape() != self.trace.meta.shape.as_slice() {
            return Err(Error::Shape {
                left: x.shape().to_vec(),
                right: self.trace.meta.shape.clone(),
            });
        }
        trace_predict(&self.trace, t, stream)
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }

    fn reset_calls(&self) {
        self.counter.reset()
    }
}
