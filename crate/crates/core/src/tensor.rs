//! Flat real-valued arrays with a shape, and the delta statistics built on them.
//!
//! Latents, noise predictions and noise deltas all share the same storage
//! ([`Tensor`]); the aliases only document intent at call sites. Arithmetic is
//! carried out in `f64` regardless of how the values were stored on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`delta_stats`].
pub const DEFAULT_ZERO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub type Latent = Tensor;
pub type NoisePred = Tensor;
pub type Delta = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Length { len: data.len(), shape });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Builds a tensor of the same shape from a per-element function of `self` and `other`.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `curr - prev`, the change in noise prediction between consecutive steps.
pub fn delta(curr: &NoisePred, prev: &NoisePred) -> Result<Delta> {
    curr.sub(prev)
}

/// Cosine similarity and norm ratio between two consecutive deltas.
///
/// Invalid samples carry an explicit flag and a zero placeholder, never NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    cos: f64,
    ratio: f64,
    cos_valid: bool,
    ratio_valid: bool,
}

impl DeltaStats {
    pub fn cos(&self) -> Option<f64> {
        self.cos_valid.then_some(self.cos)
    }

    /// `‖Δ_t‖ / ‖Δ_{t+1}‖`.
    pub fn ratio(&self) -> Option<f64> {
        self.ratio_valid.then_some(self.ratio)
    }

    pub fn is_valid(&self) -> bool {
        self.cos_valid && self.ratio_valid
    }
}

pub fn delta_stats(d_t: &Delta, d_t1: &Delta) -> Result<DeltaStats> {
    delta_stats_with_eps(d_t, d_t1, DEFAULT_ZERO_EPS)
}

pub fn delta_stats_with_eps(d_t: &Delta, d_t1: &Delta, zero_eps: f64) -> Result<DeltaStats> {
    let dot = d_t.dot(d_t1)?;
    let n_t = d_t.norm_l2();
    let n_t1 = d_t1.norm_l2();

    let ratio_valid = n_t1 >= zero_eps;
    let cos_valid = ratio_valid && n_t >= zero_eps;
    let ratio = if ratio_valid { n_t / n_t1 } else { 0.0 };
    let cos = if cos_valid {
        (dot / (n_t * n_t1)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(DeltaStats {
        cos,
        ratio,
        cos_valid,
        ratio_valid,
    })
}

/// Scales the previous delta by `ratio` to predict the next one.
pub fn extrapolate(d_t1: &Delta, ratio: f64) -> Result<Delta> {
    if !ratio.is_finite() {
        return Err(Error::Parameter(format!("extrapolation ratio {ratio} is not finite")));
    }
    let out = d_t1.scale(ratio);
    if !out.is_finite() {
        return Err(Error::Parameter("extrapolated delta overflowed".into()));
    }
    Ok(out)
}
