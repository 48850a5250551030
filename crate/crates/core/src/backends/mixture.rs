//! Exact noise prediction for an isotropic Gaussian-mixture data distribution.
//!
//! If `x0 ~ Σ wᵢ N(μᵢ, sᵢ² I)` and `x_t = α x0 + σ ε`, then
//! `p_t(x) = Σ wᵢ N(x; α μᵢ, (α² sᵢ² + σ²) I)` and the optimal noise predictor
//! is `ε*(x, t) = (x − α E[x0 | x]) / σ = −σ ∇ log p_t(x)`.

use serde::{Deserialize, Serialize};

use super::{CallCounter, DenoiserBackend, Stream};
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Domain};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Latent, NoisePred};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Latent,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureComponent>", into = "Vec<MixtureComponent>")]
pub struct MixtureModel {
    components: Vec<MixtureComponent>,
}

impl TryFrom<Vec<MixtureComponent>> for MixtureModel {
    type Error = Error;

    fn try_from(components: Vec<MixtureComponent>) -> Result<Self> {
        MixtureModel::new(components)
    }
}

impl From<MixtureModel> for Vec<MixtureComponent> {
    fn from(m: MixtureModel) -> Self {
        m.components
    }
}

impl MixtureModel {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Parameter("mixture needs at least one component".into()))?;
        let shape = first.mean.shape().to_vec();
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    left: shape,
                    right: c.mean.shape().to_vec(),
                });
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Parameter(format!("component {i} weight must be positive")));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(Error::Parameter(format!("component {i} scale must be positive")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn shape(&self) -> &[usize] {
        self.components[0].mean.shape()
    }

    /// Per-component log of `wᵢ N(x; α μᵢ, vᵢ I)` together with `vᵢ`.
    fn component_log_terms(&self, sched: &NoiseSchedule, x: &Latent, t: usize) -> Result<Vec<(f64, f64)>> {
        let alpha = sched.alpha(t);
        let sigma = sched.sigma(t);
        let dim = x.len() as f64;
        self.components
            .iter()
            .map(|c| {
                x.check_same_shape(&c.mean)?;
                let var = alpha * alpha * c.scale * c.scale + sigma * sigma;
                let sq: f64 = x
                    .data()
                    .iter()
                    .zip(c.mean.data())
                    .map(|(xi, mi)| (xi - alpha * mi).powi(2))
                    .sum();
                let log = c.weight.ln() - 0.5 * dim * (std::f64::consts::TAU * var).ln() - sq / (2.0 * var);
                Ok((log, var))
            })
            .collect()
    }

    /// Closed-form `log p_t(x)` of the noised marginal.
    pub fn log_density(&self, sched: &NoiseSchedule, x: &Latent, t: usize) -> Result<f64> {
        let terms = self.component_log_terms(sched, x, t)?;
        let max = terms.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|(l, _)| (l - max).exp()).sum();
        Ok(max + sum.ln())
    }

    /// Posterior responsibilities of each component given `x_t`.
    pub fn responsibilities(&self, sched: &NoiseSchedule, x: &Latent, t: usize) -> Result<Vec<f64>> {
        let terms = self.component_log_terms(sched, x, t)?;
        Ok(softmax(terms.iter().map(|(l, _)| *l)))
    }

    /// Posterior mean `E[x0 | x_t = x]`.
    pub fn posterior_mean(&self, sched: &NoiseSchedule, x: &Latent, t: usize) -> Result<Latent> {
        let terms = self.component_log_terms(sched, x, t)?;
        let resp = softmax(terms.iter().map(|(l, _)| *l));
        let alpha = sched.alpha(t);
        let mut out = vec![0.0; x.len()];
        for ((c, (_, var)), w) in self.components.iter().zip(&terms).zip(&resp) {
            let gain = alpha * c.scale * c.scale / var;
            for ((o, xi), mi) in out.iter_mut().zip(x.data()).zip(c.mean.data()) {
                *o += w * (mi + gain * (xi - alpha * mi));
            }
        }
        Latent::new(x.shape().to_vec(), out)
    }
}

fn softmax(logs: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logs.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn mixture_predict(m: &MixtureModel, sched: &NoiseSchedule, x: &Latent, t: usize) -> Result<NoisePred> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Parameter(format!("timestep {t} outside [1, {}]", sched.steps())));
    }
    let sigma = sched.sigma(t);
    if sigma == 0.0 {
        return Err(Error::UndefinedScore { t });
    }
    let alpha = sched.alpha(t);
    let x0 = m.posterior_mean(sched, x, t)?;
    x.zip_map(&x0, |xi, mi| (xi - alpha * mi) / sigma)
}

/// Conditional / unconditional pair combined by classifier-free guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub cond: MixtureModel,
    pub uncond: MixtureModel,
    pub scale: f64,
}

impl GuidanceSpec {
    pub fn new(cond: MixtureModel, uncond: MixtureModel, scale: f64) -> Result<Self> {
        if cond.shape() != uncond.shape() {
            return Err(Error::Shape {
                left: cond.shape().to_vec(),
                right: uncond.shape().to_vec(),
            });
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("guidance scale {scale} must be >= 0")));
        }
        Ok(Self { cond, uncond, scale })
    }

    pub fn shape(&self) -> &[usize] {
        self.cond.shape()
    }
}

pub fn guided_predict(g: &GuidanceSpec, sched: &NoiseSchedule, x: &Latent, t: usize) -> Result<NoisePred> {
    let eps_c = mixture_predict(&g.cond, sched, x, t)?;
    let eps_u = mixture_predict(&g.uncond, sched, x, t)?;
    eps_u.zip_map(&eps_c, |u, c| u + g.scale * (c - u))
}

/// Shared component means from which per-prompt guidance specs are drawn.
///
/// The unconditional model weights all components equally; a prompt's
/// conditional model concentrates its weight on a seed-chosen component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFamily {
    pub means: Vec<Latent>,
    pub cond_scale: f64,
    pub uncond_scale: f64,
    /// Weight given to the focused component in the conditional model.
    pub focus_weight: f64,
}

impl MixtureFamily {
    pub fn random(shape: &[usize], components: usize, seed: u64, spread: f64) -> Result<Self> {
        if components == 0 {
            return Err(Error::Parameter("mixture needs at least one component".into()));
        }
        let n: usize = shape.iter().product();
        let means = (0..components)
            .map(|i| {
                let rng = CounterRng::new(seed, Domain::Mixture, i as u64);
                Latent::new(shape.to_vec(), rng.normals(n).into_iter().map(|v| v * spread).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            means,
            cond_scale: 0.3,
            uncond_scale: 0.5,
            focus_weight: 0.8,
        })
    }

    pub fn uncond_model(&self) -> Result<MixtureModel> {
        let w = 1.0 / self.means.len() as f64;
        MixtureModel::new(
            self.means
                .iter()
                .map(|m| MixtureComponent {
                    weight: w,
                    mean: m.clone(),
                    scale: self.uncond_scale,
                })
                .collect(),
        )
    }

    pub fn cond_model(&self, focus: usize) -> Result<MixtureModel> {
        let k = self.means.len();
        if focus >= k {
            return Err(Error::Parameter(format!("focus component {focus} out of range")));
        }
        if k == 1 {
            return MixtureModel::new(vec![MixtureComponent {
                weight: 1.0,
                mean: self.means[0].clone(),
                scale: self.cond_scale,
            }]);
        }
        if !(self.focus_weight > 0.0 && self.focus_weight < 1.0) {
            return Err(Error::Parameter("focus weight must lie in (0, 1)".into()));
        }
        let rest = (1.0 - self.focus_weight) / (k - 1) as f64;
        MixtureModel::new(
            self.means
                .iter()
                .enumerate()
                .map(|(i, m)| MixtureComponent {
                    weight: if i == focus { self.focus_weight } else { rest },
                    mean: m.clone(),
                    scale: self.cond_scale,
                })
                .collect(),
        )
    }

    /// Guidance spec for a prompt whose conditioning focuses on component `focus`.
    pub fn guidance(&self, focus: usize, scale: f64) -> Result<GuidanceSpec> {
        GuidanceSpec::new(self.cond_model(focus)?, self.uncond_model()?, scale)
    }
}

/// Mixture oracle behind the [`DenoiserBackend`] interface.
#[derive(Debug)]
pub struct MixtureBackend {
    guidance: GuidanceSpec,
    sched: NoiseSchedule,
    counter: CallCounter,
}

impl MixtureBackend {
    pub fn new(guidance: GuidanceSpec, sched: NoiseSchedule) -> Self {
        Self {
            guidance,
            sched,
            counter: CallCounter::default(),
        }
    }

    pub fn guidance(&self) -> &GuidanceSpec {
        &self.guidance
    }
}

impl DenoiserBackend for MixtureBackend {
    fn id(&self) -> String {
        "mixture".into()
    }

    fn shape(&self) -> &[usize] {
        self.guidance.shape()
    }

    fn streams(&self) -> Vec<Stream> {
        Stream::ALL.to_vec()
    }

    fn predict(&self, x: &Latent, t: usize, stream: Stream) -> Result<NoisePred> {
        self.counter.bump();
        match stream {
            Stream::Cond => mixture_predict(&self.guidance.cond, &self.sched, x, t),
            Stream::Uncond => mixture_predict(&self.guidance.uncond, &self.sched, x, t),
            Stream::Guided => guided_predict(&self.guidance, &self.sched, x, t),
        }
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }

    fn reset_calls(&self) {
        self.counter.reset()
    }
}
