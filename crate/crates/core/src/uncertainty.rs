//! Diagonal Gaussian embeddings: the mean and log-variance heads,
//! reparameterized sampling, KL to the unit Gaussian and the uncertainty
//! level (geometric mean of σ).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::encoders::{LAYER_NORM_EPS, NORM_EPS};
use crate::error::{Error, Result};
use crate::model::{mix_key, Modality, ModelParams, ParamVars};
use crate::tensor::{Scalar, Tensor};

/// Log-variance is clamped to this range before it is used.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::DimMismatch { expected: mu.len(), actual: log_var.len() });
        }
        if mu.is_empty() {
            return Err(Error::Empty("gaussian dimension"));
        }
        Ok(GaussianEmbedding { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `exp(0.5·clamp(logVar))`.
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp()).collect()
    }
}

/// `0.5·Σ (μ² + e^logVar − logVar − 1)`.
pub fn kl_to_unit_gaussian(g: &GaussianEmbedding) -> f64 {
    0.5 * g.mu.iter().zip(&g.log_var).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

/// Geometric mean of σ, `exp(mean(0.5·logVar))`.
pub fn uncertainty_level(g: &GaussianEmbedding) -> f64 {
    let mean = g.log_var.iter().map(|lv| 0.5 * lv).sum::<f64>() / g.dim() as f64;
    mean.exp()
}

/// K samples `σ ⊙ ε_k + μ` together with the noise that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Vec<f64>>,
    pub source_noise: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn k(&self) -> usize {
        self.samples.len()
    }
}

/// Builds samples from given standard-normal draws, one row per sample.
pub fn samples_from_noise(g: &GaussianEmbedding, noise: Vec<Vec<f64>>) -> Result<SampleSet> {
    if noise.is_empty() {
        return Err(Error::Config("sample count K must be at least 1".into()));
    }
    let sigma = g.sigma();
    let mut samples = Vec::with_capacity(noise.len());
    for eps in &noise {
        if eps.len() != g.dim() {
            return Err(Error::DimMismatch { expected: g.dim(), actual: eps.len() });
        }
        samples.push(eps.iter().zip(&sigma).zip(&g.mu).map(|((e, s), m)| s * e + m).collect());
    }
    Ok(SampleSet { samples, source_noise: noise })
}

/// Draws `k` samples using `rng` for the noise.
pub fn sample_embeddings<R: Rng + ?Sized>(g: &GaussianEmbedding, k: usize, rng: &mut R) -> Result<SampleSet> {
    let noise = (0..k).map(|_| (0..g.dim()).map(|_| rng.sample(StandardNormal)).collect()).collect();
    samples_from_noise(g, noise)
}

/// Counter-based standard-normal noise: every `(epoch, batch, item, k)` cell
/// has its own independent stream, so draws do not depend on visiting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    pub fn draw(&self, epoch: u64, batch: u64, item: u64, k: u64, dim: usize) -> Vec<f64> {
        let key = mix_key(self.seed, &[epoch, batch, item, k]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// `(B, K, D)` tensor of draws for one batch.
    pub fn batch_tensor<T: Scalar>(&self, epoch: u64, batch: u64, items: usize, k: usize, dim: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(items * k * dim);
        for i in 0..items {
            for s in 0..k {
                data.extend(self.draw(epoch, batch, i as u64, s as u64, dim).into_iter().map(T::c));
            }
        }
        Tensor::new(vec![items, k, dim], data).expect("noise dims")
    }
}

// ------------------------------------------------------------------- graph

/// `l2normalize(LayerNorm(x·W + b))` on `(B, D)` pooled inputs.
pub fn mu_head_graph<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, kind: Modality, x: Var) -> Result<Var> {
    let p = |s: &str| pv.get(&format!("{}.head.mu.{s}", kind.prefix()));
    let h = g.matmul(x, p("w")?)?;
    let h = g.add(h, p("b")?)?;
    let h = g.layer_norm(h, p("ln.g")?, p("ln.b")?, LAYER_NORM_EPS)?;
    Ok(g.l2_normalize(h, NORM_EPS))
}

/// Raw affine log-variance `x·Wσ + bσ`, without the clamp.
pub fn sigma_head_raw_graph<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, kind: Modality, x: Var) -> Result<Var> {
    let p = |s: &str| pv.get(&format!("{}.head.sigma.{s}", kind.prefix()));
    let h = g.matmul(x, p("w")?)?;
    Ok(g.add(h, p("b")?)?)
}

/// Clamped log-variance.
pub fn sigma_head_graph<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, kind: Modality, x: Var) -> Result<Var> {
    let raw = sigma_head_raw_graph(g, pv, kind, x)?;
    Ok(g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX))
}

/// `(B·K, D)` samples `exp(0.5·logVar) ⊙ ε + μ` from `(B, D)` heads and
/// `(B, K, D)` noise. Gradients reach μ and logVar, never the noise.
pub fn sample_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var, noise: Tensor<T>) -> Result<Var> {
    let (b, d) = (g.dims(mu)[0], g.dims(mu)[1]);
    let k = noise.dims()[1];
    let eps = g.constant(noise);
    let half = g.scale(log_var, 0.5);
    let sigma = g.exp(half);
    let sigma = g.reshape(sigma, &[b, 1, d])?;
    let mu3 = g.reshape(mu, &[b, 1, d])?;
    let z = g.mul(sigma, eps)?;
    let z = g.add(z, mu3)?;
    Ok(g.reshape(z, &[b * k, d])?)
}

// ----------------------------------------------------------- plain wrappers

fn head_eval<T: Scalar>(
    pooled: &[f64],
    params: &ModelParams<T>,
    build: impl FnOnce(&mut Graph<T>, &ParamVars, Var) -> Result<Var>,
) -> Result<Vec<f64>> {
    if !pooled.iter().all(|v| v.is_finite()) {
        return Err(Error::Sequence("non-finite pooled input".into()));
    }
    let mut g = Graph::new();
    let pv = params.declare(&mut g, false)?;
    let x = g.constant(Tensor::new(vec![1, pooled.len()], pooled.iter().map(|&v| T::c(v)).collect())?);
    let y = build(&mut g, &pv, x)?;
    g.forward(&params.tensors)?;
    Ok(g.value(y)?.data().iter().map(|v| v.as_f64()).collect())
}

pub fn mu_head<T: Scalar>(pooled: &[f64], kind: Modality, params: &ModelParams<T>) -> Result<Vec<f64>> {
    head_eval(pooled, params, |g, pv, x| mu_head_graph(g, pv, kind, x))
}

/// Clamped log-variance for one pooled vector.
pub fn sigma_head<T: Scalar>(pooled: &[f64], kind: Modality, params: &ModelParams<T>) -> Result<Vec<f64>> {
    head_eval(pooled, params, |g, pv, x| sigma_head_graph(g, pv, kind, x))
}

pub fn gaussian_from_pooled<T: Scalar>(
    pooled: &[f64],
    kind: Modality,
    params: &ModelParams<T>,
) -> Result<GaussianEmbedding> {
    GaussianEmbedding::new(mu_head(pooled, kind, params)?, sigma_head(pooled, kind, params)?)
}
