//! Warm-up calibration: per-timestep mean and spread of delta cosine and norm
//! ratio, gathered from unaccelerated trajectories.
//!
//! Each table cell keeps `(n, mean, M2)` so tables built from disjoint prompt
//! batches can be pooled exactly with [`table_merge`]. Standard deviations use
//! the `n − 1` denominator.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{DenoiserBackend, Stream};
use crate::error::{Error, Result};
use crate::sampler::Trajectory;
use crate::schedule::{NoiseSchedule, SamplerMode, ScheduleKind};
use crate::tensor::{delta, delta_stats_with_eps, Latent, DEFAULT_ZERO_EPS};

pub const DEFAULT_PROMPT_COUNT: usize = 20;

/// Running count, mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn from_parts(n: u64, mean: f64, m2: f64) -> Self {
        Self { n, mean, m2 }
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let (na, nb) = (self.n as f64, other.n as f64);
        let d = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * nb / n as f64,
            m2: self.m2 + other.m2 + d * d * na * nb / n as f64,
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then_some(self.mean)
    }

    pub fn m2(&self) -> Option<f64> {
        (self.n > 0).then_some(self.m2)
    }

    /// Sample standard deviation; needs two samples.
    pub fn std(&self) -> Option<f64> {
        (self.n > 1).then(|| (self.m2.max(0.0) / (self.n - 1) as f64).sqrt())
    }
}

/// Calibration statistics of one conditioning stream, indexed by `t` in `0..=T−2`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTable {
    cos: Vec<Moments>,
    ratio: Vec<Moments>,
}

/// Column view used by window selection; index is the timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TableColumns {
    pub c_cos: Vec<Option<f64>>,
    pub s_cos: Vec<Option<f64>>,
    pub c_ratio: Vec<Option<f64>>,
    pub s_ratio: Vec<Option<f64>>,
}

impl TableColumns {
    /// Number of denoising steps the columns describe (`len + 1`).
    pub fn steps(&self) -> usize {
        self.c_cos.len() + 1
    }
}

impl StreamTable {
    fn empty(steps: usize) -> Self {
        Self {
            cos: vec![Moments::default(); steps - 1],
            ratio: vec![Moments::default(); steps - 1],
        }
    }

    pub fn n_valid(&self, t: usize) -> u64 {
        self.cos.get(t).map_or(0, |m| m.count())
    }

    pub fn c_cos(&self, t: usize) -> Option<f64> {
        self.cos.get(t)?.mean()
    }

    pub fn s_cos(&self, t: usize) -> Option<f64> {
        self.cos.get(t)?.std()
    }

    pub fn c_ratio(&self, t: usize) -> Option<f64> {
        self.ratio.get(t)?.mean()
    }

    pub fn s_ratio(&self, t: usize) -> Option<f64> {
        self.ratio.get(t)?.std()
    }

    pub fn len(&self) -> usize {
        self.cos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    pub fn columns(&self) -> TableColumns {
        TableColumns {
            c_cos: self.cos.iter().map(Moments::mean).collect(),
            s_cos: self.cos.iter().map(Moments::std).collect(),
            c_ratio: self.ratio.iter().map(Moments::mean).collect(),
            s_ratio: self.ratio.iter().map(Moments::std).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub backend_id: String,
    pub schedule_kind: ScheduleKind,
    pub prompt_count: usize,
    /// Unix seconds; left unset unless the caller supplies a timestamp, so
    /// repeated runs serialise identically.
    pub created_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    steps: usize,
    pub meta: TableMeta,
    streams: BTreeMap<Stream, StreamTable>,
}

impl CalibrationTable {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stream(&self, stream: Stream) -> Option<&StreamTable> {
        self.streams.get(&stream)
    }

    pub fn streams(&self) -> Vec<Stream> {
        self.streams.keys().copied().collect()
    }

    /// Builds a table with a single stream from explicit cell moments.
    pub fn from_moments(
        steps: usize,
        meta: TableMeta,
        stream: Stream,
        cos: Vec<Moments>,
        ratio: Vec<Moments>,
    ) -> Result<Self> {
        if steps < 2 || cos.len() != steps - 1 || ratio.len() != steps - 1 {
            return Err(Error::Parameter(format!(
                "table columns must have length T - 1 = {}",
                steps.saturating_sub(1)
            )));
        }
        Ok(Self {
            steps,
            meta,
            streams: BTreeMap::from([(stream, StreamTable { cos, ratio })]),
        })
    }

    fn accumulate(&mut self, traj: &Trajectory, zero_eps: f64) -> Result<()> {
        let steps = self.steps;
        for (&stream, table) in self.streams.iter_mut() {
            for t in 1..steps.saturating_sub(1) {
                let get = |u| traj.eps(stream, u).ok_or(Error::TraceIncomplete { t: u, stream });
                let d_t = delta(get(t)?, get(t + 1)?)?;
                let d_t1 = delta(get(t + 1)?, get(t + 2)?)?;
                let stats = delta_stats_with_eps(&d_t, &d_t1, zero_eps)?;
                if let (Some(c), Some(r)) = (stats.cos(), stats.ratio()) {
                    table.cos[t].push(c);
                    table.ratio[t].push(r);
                }
            }
        }
        Ok(())
    }

    /// Table built from already-recorded trajectories (live or replayed).
    pub fn from_trajectories(
        trajectories: &[Trajectory],
        meta: TableMeta,
        steps: usize,
        zero_eps: f64,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Parameter("calibration needs at least one trajectory".into()))?;
        if steps < 2 {
            return Err(Error::Parameter("calibration needs T >= 2".into()));
        }
        let mut table = CalibrationTable {
            steps,
            meta,
            streams: first
                .streams()
                .into_iter()
                .map(|s| (s, StreamTable::empty(steps)))
                .collect(),
        };
        for traj in trajectories {
            if traj.steps != steps {
                return Err(Error::Metadata(format!(
                    "trajectory has T = {}, expected {steps}",
                    traj.steps
                )));
            }
            table.accumulate(traj, zero_eps)?;
        }
        Ok(table)
    }
}

/// One calibration prompt: a backend (guidance spec bound to a model) and its noise seed.
#[derive(Clone, Copy)]
pub struct Prompt<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub streams: Option<Vec<Stream>>,
    pub zero_eps: f64,
    pub created_unix: Option<u64>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            streams: None,
            zero_eps: DEFAULT_ZERO_EPS,
            created_unix: None,
        }
    }
}

pub struct CalibrationRun {
    pub table: CalibrationTable,
    /// Final latent of every prompt, in prompt order.
    pub final_latents: Vec<Latent>,
}

pub fn calibrate(prompts: &[Prompt<'_>], sched: &NoiseSchedule, mode: SamplerMode) -> Result<CalibrationTable> {
    Ok(calibrate_with(prompts, sched, mode, &CalibrationOptions::default())?.table)
}

pub fn calibrate_with(
    prompts: &[Prompt<'_>],
    sched: &NoiseSchedule,
    mode: SamplerMode,
    opts: &CalibrationOptions,
) -> Result<CalibrationRun> {
    if prompts.len() < 2 {
        return Err(Error::Parameter(format!(
            "calibration needs at least 2 prompts, got {}",
            prompts.len()
        )));
    }
    if sched.steps() < 4 {
        return Err(Error::Parameter(format!(
            "calibration needs T >= 4, got {}",
            sched.steps()
        )));
    }
    let backend_id = prompts[0].backend.id();
    let streams = match &opts.streams {
        Some(s) => s.clone(),
        None => prompts[0].backend.streams(),
    };
    let trajectories = prompts
        .par_iter()
        .map(|p| Trajectory::record(p.backend, sched, mode, p.seed, &streams, false))
        .collect::<Result<Vec<_>>>()?;
    let meta = TableMeta {
        backend_id,
        schedule_kind: sched.kind(),
        prompt_count: prompts.len(),
        created_unix: opts.created_unix,
    };
    let table = CalibrationTable::from_trajectories(&trajectories, meta, sched.steps(), opts.zero_eps)?;
    let final_latents = trajectories
        .into_iter()
        .map(|t| t.x0.expect("recorded trajectories carry x0"))
        .collect();
    Ok(CalibrationRun { table, final_latents })
}

/// Pools two tables as if their samples had been gathered in one run.
pub fn table_merge(a: &CalibrationTable, b: &CalibrationTable) -> Result<CalibrationTable> {
    if a.steps != b.steps {
        return Err(Error::Metadata(format!("T differs: {} vs {}", a.steps, b.steps)));
    }
    if a.meta.schedule_kind != b.meta.schedule_kind {
        return Err(Error::Metadata("schedule kinds differ".into()));
    }
    if a.meta.backend_id != b.meta.backend_id {
        return Err(Error::Metadata(format!(
            "backend ids differ: {} vs {}",
            a.meta.backend_id, b.meta.backend_id
        )));
    }
    if a.streams() != b.streams() {
        return Err(Error::Metadata("stream sets differ".into()));
    }
    let streams = a
        .streams
        .iter()
        .map(|(s, ta)| {
            let tb = &b.streams[s];
            let merge = |x: &[Moments], y: &[Moments]| x.iter().zip(y).map(|(p, q)| p.merge(q)).collect();
            (
                *s,
                StreamTable {
                    cos: merge(&ta.cos, &tb.cos),
                    ratio: merge(&ta.ratio, &tb.ratio),
                },
            )
        })
        .collect();
    Ok(CalibrationTable {
        steps: a.steps,
        meta: TableMeta {
            backend_id: a.meta.backend_id.clone(),
            schedule_kind: a.meta.schedule_kind,
            prompt_count: a.meta.prompt_count + b.meta.prompt_count,
            created_unix: a.meta.created_unix.max(b.meta.created_unix),
        },
        streams,
    })
}

// JSON form: explicit columns (null = absent) plus the second moments needed for merging.

#[derive(Serialize, Deserialize)]
struct StreamColumnsFile {
    c_cos: Vec<Option<f64>>,
    s_cos: Vec<Option<f64>>,
    c_ratio: Vec<Option<f64>>,
    s_ratio: Vec<Option<f64>>,
    n_valid: Vec<u64>,
    m2_cos: Vec<Option<f64>>,
    m2_ratio: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    #[serde(rename = "T")]
    steps: usize,
    meta: TableMeta,
    streams: BTreeMap<Stream, StreamColumnsFile>,
}

impl Serialize for CalibrationTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let streams = self
            .streams
            .iter()
            .map(|(s, t)| {
                let cols = t.columns();
                (
                    *s,
                    StreamColumnsFile {
                        c_cos: cols.c_cos,
                        s_cos: cols.s_cos,
                        c_ratio: cols.c_ratio,
                        s_ratio: cols.s_ratio,
                        n_valid: t.cos.iter().map(Moments::count).collect(),
                        m2_cos: t.cos.iter().map(Moments::m2).collect(),
                        m2_ratio: t.ratio.iter().map(Moments::m2).collect(),
                    },
                )
            })
            .collect();
        TableFile {
            steps: self.steps,
            meta: self.meta.clone(),
            streams,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CalibrationTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = TableFile::deserialize(deserializer)?;
        if file.steps < 2 {
            return Err(D::Error::custom("T must be at least 2"));
        }
        let len = file.steps - 1;
        let mut streams = BTreeMap::new();
        for (s, c) in file.streams {
            let lens = [
                c.c_cos.len(),
                c.c_ratio.len(),
                c.n_valid.len(),
                c.m2_cos.len(),
                c.m2_ratio.len(),
            ];
            if lens.iter().any(|&l| l != len) {
                return Err(D::Error::custom(format!("stream {s}: columns must have length {len}")));
            }
            let build = |means: &[Option<f64>], m2s: &[Option<f64>]| -> std::result::Result<Vec<Moments>, D::Error> {
                (0..len)
                    .map(|t| match (c.n_valid[t], means[t], m2s[t]) {
                        (0, _, _) => Ok(Moments::default()),
                        (n, Some(mean), Some(m2)) => Ok(Moments::from_parts(n, mean, m2)),
                        _ => Err(D::Error::custom(format!(
                            "stream {s}: t = {t} has samples but null moments"
                        ))),
                    })
                    .collect()
            };
            let cos = build(&c.c_cos, &c.m2_cos)?;
            let ratio = build(&c.c_ratio, &c.m2_ratio)?;
            streams.insert(s, StreamTable { cos, ratio });
        }
        Ok(CalibrationTable {
            steps: file.steps,
            meta: file.meta,
            streams,
        })
    }
}
