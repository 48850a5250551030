#![allow(dead_code)]

use taocache::backends::{GeometricBackend, MixtureBackend, MixtureFamily, TraceBackend};
use taocache::calibration::{calibrate, Prompt};
use taocache::rng::{CounterRng, Domain};
use taocache::sampler::Trajectory;
use taocache::schedule::{initial_noise, make_schedule, NoiseSchedule, ScheduleKind};
use taocache::{read_trace, write_trace, CalibrationTable, DenoiserBackend, Latent, NoisePred, SamplerMode, Stream};

pub const SHAPE: [usize; 2] = [32, 32];
pub const STEPS: usize = 50;
pub const GUIDANCE: f64 = 3.0;
pub const COMPONENTS: usize = 3;
pub const FAMILY_SEED: u64 = 7;
/// Per-coordinate spread of component means. At 0.3 the modes overlap enough
/// that trajectories commit to a component mid-way through sampling.
pub const SPREAD: f64 = 0.3;
pub const CALIBRATION_PROMPTS: usize = 20;
pub const EVAL_SEEDS: u64 = 20;

/// Three-component guided mixture: one backend per focus component.
pub struct MixtureScenario {
    pub sched: NoiseSchedule,
    pub backends: Vec<MixtureBackend>,
}

impl MixtureScenario {
    pub fn new() -> Self {
        Self::with_schedule(ScheduleKind::VariancePreservingCosine, STEPS)
    }

    pub fn with_schedule(kind: ScheduleKind, steps: usize) -> Self {
        let sched = make_schedule(kind, steps).unwrap();
        let family = MixtureFamily::random(&SHAPE, COMPONENTS, FAMILY_SEED, SPREAD).unwrap();
        let backends = (0..COMPONENTS)
            .map(|focus| MixtureBackend::new(family.guidance(focus, GUIDANCE).unwrap(), sched.clone()))
            .collect();
        Self { sched, backends }
    }

    pub fn backend(&self, i: usize) -> &MixtureBackend {
        &self.backends[i % self.backends.len()]
    }

    pub fn prompts(&self, count: usize, seed_base: u64) -> Vec<Prompt<'_>> {
        (0..count)
            .map(|i| Prompt {
                backend: self.backend(i),
                seed: seed_base + i as u64,
            })
            .collect()
    }

    pub fn calibrate(&self, mode: SamplerMode) -> CalibrationTable {
        calibrate(&self.prompts(CALIBRATION_PROMPTS, 1000), &self.sched, mode).unwrap()
    }

    /// Evaluation seed `s` uses focus `s mod 3` and its own starting noise.
    pub fn eval_case(&self, s: u64) -> (&MixtureBackend, Latent) {
        (self.backend(s as usize), initial_noise(&SHAPE, 5000 + s))
    }
}

/// Geometric-delta fixture: `cos = 1` and norm ratio `r` at every step.
pub fn geometric_backend(shape: &[usize], r: f64, steps: usize, seed: u64) -> GeometricBackend {
    let n: usize = shape.iter().product();
    let base = Latent::new(shape.to_vec(), CounterRng::new(seed, Domain::Fixture, 0).normals(n)).unwrap();
    let d0 = Latent::new(
        shape.to_vec(),
        CounterRng::new(seed, Domain::Fixture, 1)
            .normals(n)
            .iter()
            .map(|v| 0.05 * v)
            .collect(),
    )
    .unwrap();
    GeometricBackend::new(base, d0, r, steps).unwrap()
}

pub fn rel_l2(reference: &Latent, candidate: &Latent) -> f64 {
    reference.sub(candidate).unwrap().norm_l2() / reference.norm_l2()
}

pub mod window;

/// Rounds every prediction to f32, as a model computing natively in single precision would.
pub struct F32Native<'a>(pub &'a dyn DenoiserBackend);

impl DenoiserBackend for F32Native<'_> {
    fn id(&self) -> String {
        self.0.id()
    }
    fn shape(&self) -> &[usize] {
        self.0.shape()
    }
    fn streams(&self) -> Vec<Stream> {
        self.0.streams()
    }
    fn predict(&self, x: &Latent, t: usize, stream: Stream) -> taocache::Result<NoisePred> {
        let eps = self.0.predict(x, t, stream)?;
        NoisePred::from_f32(eps.shape().to_vec(), &eps.to_f32())
    }
    fn calls(&self) -> u64 {
        self.0.calls()
    }
    fn reset_calls(&self) {
        self.0.reset_calls()
    }
}

/// Largest absolute difference over every cell of every stream.
pub fn table_distance(a: &CalibrationTable, b: &CalibrationTable) -> f64 {
    let mut worst: f64 = 0.0;
    for stream in a.streams() {
        let (x, y) = (a.stream(stream).unwrap(), b.stream(stream).unwrap());
        for t in 0..a.steps() - 1 {
            assert_eq!(x.n_valid(t), y.n_valid(t), "{stream} t = {t}");
            for (u, v) in [
                (x.c_cos(t), y.c_cos(t)),
                (x.s_cos(t), y.s_cos(t)),
                (x.c_ratio(t), y.c_ratio(t)),
                (x.s_ratio(t), y.s_ratio(t)),
            ] {
                match (u, v) {
                    (Some(u), Some(v)) => worst = worst.max((u - v).abs()),
                    (None, None) => {}
                    _ => return f64::INFINITY,
                }
            }
        }
    }
    worst
}

/// Records each prompt, stores it as a trace, and calibrates again from the decoded bytes.
pub fn replayed_table(prompts: &[Prompt<'_>], sched: &NoiseSchedule, mode: SamplerMode) -> CalibrationTable {
    let replays: Vec<TraceBackend> = prompts
        .iter()
        .map(|p| {
            let traj = Trajectory::record(p.backend, sched, mode, p.seed, &Stream::ALL, false).unwrap();
            let mut bytes = Vec::new();
            write_trace(
                &traj
                    .to_trace(&p.backend.id(), sched.kind().as_str(), p.backend.shape())
                    .unwrap(),
                &mut bytes,
            )
            .unwrap();
            TraceBackend::new(read_trace(&bytes[..]).unwrap())
        })
        .collect();
    let replay_prompts: Vec<Prompt> = replays
        .iter()
        .zip(prompts)
        .map(|(b, p)| Prompt {
            backend: b as &dyn DenoiserBackend,
            seed: p.seed,
        })
        .collect();
    calibrate(&replay_prompts, sched, mode).unwrap()
}
