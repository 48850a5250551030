use super::{CallCounter, DenoiserBackend, Stream};
use crate::error::{Error, Result};
use crate::tensor::{Delta, Latent, NoisePred};

/// Noise prediction whose consecutive deltas form an exact geometric sequence:
/// `Δ_t = r^(T−1−t) · d0` for every `t ≤ T − 1`, with `ε_T = base`.
pub fn geometric_predict(base: &NoisePred, d0: &Delta, r: f64, t: usize, steps: usize) -> Result<NoisePred> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("geometric ratio {r} must be positive")));
    }
    if t > steps {
        return Err(Error::Parameter(format!("timestep {t} outside [0, {steps}]")));
    }
    base.check_same_shape(d0)?;
    // ε_t = base + d0 · Σ_{k=0}^{T−1−t} r^k, summed term by term
    let mut factor = 0.0;
    let mut term = 1.0;
    for _ in 0..steps - t {
        factor += term;
        term *= r;
    }
    base.zip_map(d0, |b, d| b + factor * d)
}

/// Exactness fixture: ignores the latent and replays a geometric delta sequence.
#[derive(Debug)]
pub struct GeometricBackend {
    base: NoisePred,
    d0: Delta,
    ratio: f64,
    steps: usize,
    counter: CallCounter,
}

impl GeometricBackend {
    pub fn new(base: NoisePred, d0: Delta, ratio: f64, steps: usize) -> Result<Self> {
        base.check_same_shape(&d0)?;
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::Parameter(format!("geometric ratio {ratio} must be positive")));
        }
        Ok(Self {
            base,
            d0,
            ratio,
            steps,
            counter: CallCounter::default(),
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl DenoiserBackend for GeometricBackend {
    fn id(&self) -> String {
        "geometric".into()
    }

    fn shape(&self) -> &[usize] {
        self.base.shape()
    }

    fn streams(&self) -> Vec<Stream> {
        Stream::ALL.to_vec()
    }

    fn predict(&self, x: &Latent, t: usize, _stream: Stream) -> Result<NoisePred> {
        self.counter.bump();
        x.check_same_shape(&self.base)?;
        if t == 0 {
            return Err(Error::Parameter("geometric fixture is defined for t >= 1".into()));
        }
        geometric_predict(&self.base, &self.d0, self.ratio, t, self.steps)
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }

    fn reset_calls(&self) {
        self.counter.reset()
    }
}
