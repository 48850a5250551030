//! Unaccelerated sampling and trajectory recording.

use std::collections::BTreeMap;

use crate::backends::{DenoiserBackend, Stream};
use crate::error::{Error, Result};
use crate::schedule::{initial_noise, scheduler_step, NoiseSchedule, SamplerMode, SamplerState};
use crate::tensor::{Latent, NoisePred};
use crate::trace::{Trace, TraceMeta, TraceRecord};

/// Plain `T`-step sampling with the guided stream; no caching machinery involved.
pub fn sample_plain(
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    x_t: Latent,
    seed: u64,
) -> Result<Latent> {
    let mut state = SamplerState::new(x_t, sched.steps(), seed);
    while state.t > 0 {
        let eps = backend.predict(&state.x, state.t, Stream::Guided)?;
        state = scheduler_step(&state, &eps, sched, mode)?;
    }
    Ok(state.x)
}

/// Every noise prediction of one unaccelerated trajectory, indexed by `t`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    pub steps: usize,
    /// `eps[stream][t]` for `t in 1..=T`; index 0 is always `None`.
    pub eps: BTreeMap<Stream, Vec<Option<NoisePred>>>,
    /// Sampler input `x_t`, index `t`, when captured.
    pub latents: Option<Vec<Option<Latent>>>,
    pub x0: Option<Latent>,
}

impl Trajectory {
    pub fn eps(&self, stream: Stream, t: usize) -> Option<&NoisePred> {
        self.eps.get(&stream)?.get(t)?.as_ref()
    }

    pub fn streams(&self) -> Vec<Stream> {
        self.eps.keys().copied().collect()
    }

    /// Runs the full loop, recording `streams` at every step. The scheduler is
    /// always driven by the guided prediction.
    pub fn record(
        backend: &dyn DenoiserBackend,
        sched: &NoiseSchedule,
        mode: SamplerMode,
        seed: u64,
        streams: &[Stream],
        keep_latents: bool,
    ) -> Result<Trajectory> {
        let steps = sched.steps();
        let mut eps: BTreeMap<Stream, Vec<Option<NoisePred>>> =
            streams.iter().map(|&s| (s, vec![None; steps + 1])).collect();
        let mut latents = keep_latents.then(|| vec![None; steps + 1]);

        let mut state = SamplerState::new(initial_noise(backend.shape(), seed), steps, seed);
        while state.t > 0 {
            let t = state.t;
            let mut guided = None;
            for (&stream, series) in eps.iter_mut() {
                let pred = backend.predict(&state.x, t, stream)?;
                if stream == Stream::Guided {
                    guided = Some(pred.clone());
                }
                series[t] = Some(pred);
            }
            let guided = match guided {
                Some(g) => g,
                None => backend.predict(&state.x, t, Stream::Guided)?,
            };
            if let Some(l) = latents.as_mut() {
                l[t] = Some(state.x.clone());
            }
            state = scheduler_step(&state, &guided, sched, mode)?;
        }
        Ok(Trajectory {
            seed,
            steps,
            eps,
            latents,
            x0: Some(state.x),
        })
    }

    /// Stores the trajectory in the f32 trace format.
    pub fn to_trace(&self, model_id: &str, schedule_kind: &str, shape: &[usize]) -> Result<Trace> {
        let streams = self.streams();
        let mut meta = TraceMeta::new(model_id, self.steps as u32, shape.to_vec(), &streams);
        meta.schedule_kind = schedule_kind.to_string();
        meta.seed = self.seed;
        let mut trace = Trace::new(meta);
        for t in (1..=self.steps).rev() {
            for &s in &streams {
                let e = self.eps(s, t).ok_or(Error::TraceIncomplete { t, stream: s })?;
                let latent = self.latents.as_ref().and_then(|l| l[t].as_ref()).map(|x| x.to_f32());
                trace.records.push(TraceRecord {
                    t: t as u32,
                    stream: s,
                    eps: e.to_f32(),
                    latent,
                });
            }
        }
        trace.validate()?;
        Ok(trace)
    }

    pub fn from_trace(trace: &Trace) -> Result<Trajectory> {
        let steps = trace.meta.steps as usize;
        let shape = trace.meta.shape.clone();
        let mut eps: BTreeMap<Stream, Vec<Option<NoisePred>>> = trace
            .meta
            .streams()
            .into_iter()
            .map(|s| (s, vec![None; steps + 1]))
            .collect();
        let mut latents = trace.has_latents().then(|| vec![None; steps + 1]);
        for r in &trace.records {
            let t = r.t as usize;
            if let Some(series) = eps.get_mut(&r.stream) {
                series[t] = Some(NoisePred::from_f32(shape.clone(), &r.eps)?);
            }
            if let (Some(l), Some(x)) = (latents.as_mut(), r.latent.as_ref()) {
                l[t] = Some(Latent::from_f32(shape.clone(), x)?);
            }
        }
        Ok(Trajectory {
            seed: trace.meta.seed,
            steps,
            eps,
            latents,
            x0: None,
        })
    }
}
