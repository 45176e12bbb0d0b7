//! Poisson-Gaussian corruption `y = x + η(x)·n`, `η²(x) = a·x + σ²`, `n ~ N(0, I)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Generator used for every stochastic step in the crate.
pub type NoiseRng = ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> NoiseRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noise parameters: `a` scales the signal-dependent (Poisson) variance and
/// `sigma` is the signal-independent (Gaussian) standard deviation. Both live
/// in the normalised intensity domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub a: f64,
    pub sigma: f64,
}

impl NoiseParams {
    pub fn new(a: f64, sigma: f64) -> Result<Self> {
        if !(a >= 0.0 && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise parameters must be non-negative, got a={a} sigma={sigma}"
            )));
        }
        Ok(NoiseParams { a, sigma })
    }

    pub fn gaussian(sigma: f64) -> Self {
        NoiseParams { a: 0.0, sigma }
    }

    pub fn poisson(a: f64) -> Self {
        NoiseParams { a, sigma: 0.0 }
    }

    /// Stacks per-example parameters into the `[N, 2]` conditioning tensor.
    pub fn batch<T: Scalar>(params: &[NoiseParams]) -> Tensor<T> {
        let data = params
            .iter()
            .flat_map(|p| [T::from_f64_lossy(p.a), T::from_f64_lossy(p.sigma)])
            .collect();
        Tensor::from_vec(&[params.len(), 2], data).expect("two columns per row")
    }
}

/// Which validation noise a sweep applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// `(0, v)`: additive white Gaussian noise of standard deviation `v`.
    Gaussian,
    /// `(v, 0)`: purely signal-dependent noise with Poissonian parameter `v`.
    Poisson,
}

impl NoiseKind {
    pub fn params(self, level: f64) -> NoiseParams {
        match self {
            NoiseKind::Gaussian => NoiseParams::gaussian(level),
            NoiseKind::Poisson => NoiseParams::poisson(level),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Poisson => "poisson",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "poisson" => Ok(NoiseKind::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Closed interval `[lo, hi]` with `0 <= lo <= hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid range [{lo}, {hi}]")));
        }
        Ok(Range { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_degenerate() {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Independent uniform distributions over `a` and `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    pub a: Range,
    pub sigma: Range,
}

impl NoiseDistribution {
    pub fn new(a: Range, sigma: Range) -> Result<Self> {
        Range::new(a.lo, a.hi)?;
        Range::new(sigma.lo, sigma.hi)?;
        Ok(NoiseDistribution { a, sigma })
    }

    /// Always yields `p`.
    pub fn fixed(p: NoiseParams) -> Self {
        NoiseDistribution {
            a: Range::point(p.a),
            sigma: Range::point(p.sigma),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.a.is_degenerate() && self.sigma.is_degenerate()
    }
}

/// Draws `(a, sigma)` independently and uniformly from `dist`.
pub fn sample_params<R: Rng + ?Sized>(dist: &NoiseDistribution, rng: &mut R) -> NoiseParams {
    let a = dist.a.sample(rng);
    let sigma = dist.sigma.sample(rng);
    NoiseParams { a, sigma }
}

/// Per-pixel variance `a·x + σ²`.
///
/// With `strict` a negative intensity is an error; otherwise the
/// signal-dependent term is floored at zero.
pub fn variance_map<T: Scalar>(x: &Tensor<T>, p: NoiseParams, strict: bool) -> Result<Tensor<T>> {
    let s2 = p.sigma * p.sigma;
    if strict {
        if let Some(v) = x.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::InvalidArgument(format!("negative intensity {v} in variance_map")));
        }
    }
    Ok(x.map(|v| T::from_f64_lossy(pixel_variance(v.as_f64(), p.a, s2))))
}

#[inline]
fn pixel_variance(x: f64, a: f64, sigma2: f64) -> f64 {
    (a * x).max(0.0) + sigma2
}

/// Applies the corruption with draws from `rng`. The result is not clipped.
pub fn corrupt<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, p: NoiseParams, rng: &mut R) -> Tensor<T> {
    let s2 = p.sigma * p.sigma;
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            let std = pixel_variance(v.as_f64(), p.a, s2).sqrt();
            v + T::from_f64_lossy(std * z)
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same element count")
}

/// Standard deviation of `denoised − clean` (a constant bias does not count).
pub fn residual_noise_std<T: Scalar>(denoised: &Tensor<T>, clean: &Tensor<T>) -> Result<f64> {
    if denoised.shape() != clean.shape() {
        return shape_err("residual_noise_std", denoised.shape(), clean.shape());
    }
    let n = denoised.numel();
    if n == 0 {
        return Err(Error::Empty("residual_noise_std"));
    }
    let diffs = denoised.data().iter().zip(clean.data()).map(|(&d, &c)| d.as_f64() - c.as_f64());
    let mean = diffs.clone().sum::<f64>() / n as f64;
    let var = diffs.map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    Ok(var.sqrt())
}
