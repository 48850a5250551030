use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use taocache::backends::{GeometricBackend, MixtureBackend, MixtureFamily, TraceBackend};
use taocache::policy::{MagnitudeRule, ResidualRule};
use taocache::rng::{CounterRng, Domain};
use taocache::trace::read_trace_file;
use taocache::{make_schedule, DenoiserBackend, Latent, NoiseSchedule, SamplerMode, ScheduleKind, WindowParams};

use crate::exit::ConfigError;

pub const OUTPUT_DIR_ENV: &str = "TAOCACHE_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerMode,
    pub backend: BackendConfig,
    #[serde(default)]
    pub prompts: Vec<PromptSpec>,
    /// Generates `count` prompts when `prompts` is empty.
    #[serde(default)]
    pub prompt_count: Option<usize>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Base for prompt seeds that are not given explicitly.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core. Never changes outputs.
    #[serde(default)]
    pub threads: usize,
    /// Write a trace per prompt (with latents during calibration).
    #[serde(default)]
    pub record_traces: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("taocache-out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Mixture {
        shape: Vec<usize>,
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        family_seed: u64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_guidance")]
        guidance_scale: f64,
    },
    Geometric {
        shape: Vec<usize>,
        ratio: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_delta_scale")]
        delta_scale: f64,
    },
    /// Replays recorded traces; every prompt names its own file.
    Trace,
}

fn default_components() -> usize {
    3
}

fn default_spread() -> f64 {
    0.3
}

fn default_guidance() -> f64 {
    3.0
}

fn default_delta_scale() -> f64 {
    0.05
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Mixture component the conditional model favours.
    #[serde(default)]
    pub focus: Option<usize>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PolicyName {
    Full,
    Taocache,
    TaoResidual,
    Residual,
    Magnitude,
    Hybrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub name: PolicyName,
    pub window: WindowParams,
    pub residual: ResidualRule,
    pub magnitude: MagnitudeRule,
    /// Full steps forced between the residual region and the window in the hybrid policy.
    pub refresh_steps: usize,
    /// Skip count to hit by tuning the baseline threshold per prompt.
    pub budget: Option<usize>,
    pub table: Option<PathBuf>,
    pub plan: Option<PathBuf>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            name: PolicyName::Full,
            window: WindowParams::default(),
            residual: ResidualRule::default(),
            magnitude: MagnitudeRule::default(),
            refresh_steps: 2,
            budget: None,
            table: None,
            plan: None,
        }
    }
}

/// A prompt after defaults are filled in.
#[derive(Debug, Clone)]
pub struct ResolvedPrompt {
    pub id: String,
    pub seed: u64,
    pub focus: usize,
    pub trace: Option<PathBuf>,
}

pub enum Backends {
    Mixture(Vec<MixtureBackend>),
    Geometric(GeometricBackend),
    /// One replay backend per prompt, in prompt order.
    Trace(Vec<TraceBackend>),
}

impl Backends {
    pub fn for_prompt(&self, index: usize, prompt: &ResolvedPrompt) -> &dyn DenoiserBackend {
        match self {
            Backends::Mixture(bs) => &bs[prompt.focus],
            Backends::Geometric(b) => b,
            Backends::Trace(bs) => &bs[index],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        // relative paths inside the config resolve against its directory
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in &mut cfg.prompts {
            if let Some(t) = &mut p.trace {
                rebase(t);
            }
        }
        if let Some(t) = &mut cfg.policy.table {
            rebase(t);
        }
        if let Some(p) = &mut cfg.policy.plan {
            rebase(p);
        }
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn schedule(&self) -> anyhow::Result<NoiseSchedule> {
        make_schedule(self.schedule.kind, self.schedule.steps).map_err(|e| ConfigError(format!("schedule: {e}")).into())
    }

    /// Checks that the policy's table and plan files exist.
    pub fn validate_policy_files(&self) -> Result<(), ConfigError> {
        for (key, path) in [("policy.table", &self.policy.table), ("policy.plan", &self.policy.plan)] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(ConfigError(format!("{key}: {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolved_prompts(&self) -> Vec<ResolvedPrompt> {
        let components = match &self.backend {
            BackendConfig::Mixture { components, .. } => *components,
            _ => 1,
        };
        let specs = if self.prompts.is_empty() {
            vec![PromptSpec::default(); self.prompt_count.unwrap_or(0)]
        } else {
            self.prompts.clone()
        };
        specs
            .into_iter()
            .enumerate()
            .map(|(i, p)| ResolvedPrompt {
                id: p.id.unwrap_or_else(|| format!("p{i:03}")),
                seed: p.seed.unwrap_or(self.seed + i as u64),
                focus: p.focus.unwrap_or(i % components.max(1)),
                trace: p.trace,
            })
            .collect()
    }

    /// Range and reference checks, run before any sampling work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError(msg));
        if self.schedule.steps < 2 {
            return bad(format!("schedule.T must be at least 2, got {}", self.schedule.steps));
        }
        if let SamplerMode::AncestralDdpm { eta } = self.sampler {
            if !(0.0..=1.0).contains(&eta) {
                return bad(format!("sampler.eta {eta} outside [0, 1]"));
            }
        }
        let prompts = self.resolved_prompts();
        if prompts.is_empty() {
            return bad("no prompts: give `prompts` or `prompt_count`".into());
        }
        let mut ids = BTreeSet::new();
        for p in &prompts {
            if !ids.insert(p.id.as_str()) {
                return bad(format!("duplicate prompt id {:?}", p.id));
            }
            if p.id.is_empty() || p.id.contains(['/', '\\']) {
                return bad(format!("prompt id {:?} is not a valid file stem", p.id));
            }
        }
        match &self.backend {
            BackendConfig::Mixture {
                shape,
                components,
                spread,
                guidance_scale,
                ..
            } => {
                check_shape(shape)?;
                if *components == 0 {
                    return bad("backend.components must be positive".into());
                }
                if !(spread.is_finite() && *spread >= 0.0 && guidance_scale.is_finite()) {
                    return bad("backend.spread and backend.guidance_scale must be finite, spread nonnegative".into());
                }
                if let Some(p) = prompts.iter().find(|p| p.focus >= *components) {
                    return bad(format!(
                        "prompt {} focuses on component {} of {components}",
                        p.id, p.focus
                    ));
                }
            }
            BackendConfig::Geometric {
                shape,
                ratio,
                delta_scale,
                ..
            } => {
                check_shape(shape)?;
                if !(ratio.is_finite() && *ratio > 0.0 && delta_scale.is_finite()) {
                    return bad(format!("backend.ratio must be positive and finite, got {ratio}"));
                }
            }
            BackendConfig::Trace => {
                for p in &prompts {
                    match &p.trace {
                        None => return bad(format!("prompt {} has no trace path", p.id)),
                        Some(path) if !path.is_file() => {
                            return bad(format!("prompt {}: trace {} does not exist", p.id, path.display()))
                        }
                        _ => {}
                    }
                }
            }
        }
        let r = &self.policy.residual;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(r.rel_l1_thresh) || !nonneg(self.policy.magnitude.mag_thresh) {
            return bad("baseline thresholds must be nonnegative".into());
        }
        if self.policy.budget.is_some_and(|b| b >= self.schedule.steps) {
            return bad(format!("policy.budget must be below T = {}", self.schedule.steps));
        }
        Ok(())
    }

    pub fn build_backends(&self, sched: &NoiseSchedule, prompts: &[ResolvedPrompt]) -> anyhow::Result<Backends> {
        Ok(match &self.backend {
            BackendConfig::Mixture {
                shape,
                components,
                family_seed,
                spread,
                guidance_scale,
            } => {
                let family = MixtureFamily::random(shape, *components, *family_seed, *spread)?;
                let backends = (0..*components)
                    .map(|focus| {
                        Ok(MixtureBackend::new(
                            family.guidance(focus, *guidance_scale)?,
                            sched.clone(),
                        ))
                    })
                    .collect::<taocache::Result<Vec<_>>>()?;
                Backends::Mixture(backends)
            }
            BackendConfig::Geometric {
                shape,
                ratio,
                seed,
                delta_scale,
            } => {
                let n: usize = shape.iter().product();
                let base = Latent::new(shape.clone(), CounterRng::new(*seed, Domain::Fixture, 0).normals(n))?;
                let d0 = CounterRng::new(*seed, Domain::Fixture, 1).normals(n);
                let d0 = Latent::new(shape.clone(), d0.into_iter().map(|v| v * delta_scale).collect())?;
                Backends::Geometric(GeometricBackend::new(base, d0, *ratio, sched.steps())?)
            }
            BackendConfig::Trace => {
                let mut backends = Vec::with_capacity(prompts.len());
                for p in prompts {
                    let path = p.trace.as_ref().expect("validated");
                    let trace = read_trace_file(path).with_context(|| format!("reading trace {}", path.display()))?;
                    if trace.meta.steps as usize != sched.steps() {
                        return Err(taocache::Error::Metadata(format!(
                            "{} covers T = {}, schedule has T = {}",
                            path.display(),
                            trace.meta.steps,
                            sched.steps()
                        ))
                        .into());
                    }
                    backends.push(TraceBackend::new(trace));
                }
                Backends::Trace(backends)
            }
        })
    }

    pub fn shape(&self, backends: &Backends) -> Vec<usize> {
        match backends {
            Backends::Mixture(bs) => bs[0].shape().to_vec(),
            Backends::Geometric(b) => b.shape().to_vec(),
            Backends::Trace(bs) => bs[0].shape().to_vec(),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<(), ConfigError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(ConfigError(format!(
            "backend.shape {shape:?} must be nonempty with positive dims"
        )));
    }
    Ok(())
}

/// Flag beats environment beats config file.
pub fn output_dir(flag: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    configured.map(Path::to_path_buf).unwrap_or_else(default_output_dir)
}

pub fn thread_pool(threads: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}
