//! Numerical checks of the task-free masking theory.
//!
//! * Update moments under Bernoulli masking with SGD: closed form
//!   ([`theorem1_covariance`]) against Monte Carlo
//!   ([`simulate_update_covariance`]).
//! * The sharpness admitted at a minimum before an update of variance σ²
//!   escapes it ([`escape_rho_bound`], checked by [`escape_frequency`]) and
//!   the PAC-Bayes style generalization bound ([`generalization_bound`]).
//! * Top Hessian eigenvalue by power iteration on finite-difference
//!   Hessian-vector products ([`sharpness_power_iteration`]).
//!
//! Monte Carlo work is split into a fixed number of shards, each with its own
//! ChaCha stream derived from the master seed, and merged in shard order, so
//! results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{Dataset, Model};
use crate::numeric::l2_norm;
use crate::params::ParamVector;
use crate::special::chi2_quantile;
use crate::tensor::forward_backward;

const SHARDS: usize = 16;

fn shard_rng(seed: u64, shard: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard as u64 + 1);
    rng
}

fn shard_sizes(trials: usize) -> Vec<usize> {
    (0..SHARDS)
        .map(|s| trials / SHARDS + usize::from(s < trials % SHARDS))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Full-batch gradient ∂L/∂w; its length is the dimension k.
    pub grad_mean: Vec<f64>,
    /// Standard deviation of per-example gradient noise.
    pub sigma_g: f64,
    pub batch_size: usize,
    /// Probability of keeping a gradient coordinate.
    pub p: f64,
    pub eta: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.grad_mean.is_empty() {
            return Err(Error::invalid("noise model needs dimension >= 1"));
        }
        if !(self.sigma_g > 0.0) || self.batch_size == 0 || !(self.eta > 0.0) {
            return Err(Error::invalid(
                "noise model needs sigma_g > 0, batch_size >= 1, eta > 0",
            ));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid(format!(
                "keep probability must lie in (0, 1], got {}",
                self.p
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grad_mean.len()
    }
}

/// Closed-form mean and covariance diagonal of one masked SGD update:
/// `E = -η ∂L/∂w`, `Σ_ii = η²σ_g²/(p|B|) + (1-p)η²(∂L/∂w_i)²/p`.
pub fn theorem1_covariance(noise: &NoiseModel) -> Result<(Vec<f64>, Vec<f64>)> {
    noise.validate()?;
    let (eta, p) = (noise.eta, noise.p);
    let base = eta * eta * noise.sigma_g * noise.sigma_g / (p * noise.batch_size as f64);
    let mean = noise.grad_mean.iter().map(|g| -eta * g).collect();
    let var = noise
        .grad_mean
        .iter()
        .map(|g| base + (1.0 - p) * eta * eta * g * g / p)
        .collect();
    Ok((mean, var))
}

/// Per-coordinate sample mean and unbiased sample variance.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMoments {
    pub trials: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(k: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; k],
            m2: vec![0.0; k],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn merge(mut self, other: &Welford) -> Self {
        if other.n == 0.0 {
            return self;
        }
        let n = self.n + other.n;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * other.n / n;
            self.m2[i] += other.m2[i] + d * d * self.n * other.n / n;
        }
        self.n = n;
        self
    }
}

/// Monte Carlo of the same update: per-example gradients from
/// N(∂L/∂w, σ_g² I), averaged over the batch, masked by Bernoulli(p) with
/// 1/p rescaling, times -η.
pub fn simulate_update_covariance(
    noise: &NoiseModel,
    trials: usize,
    seed: u64,
) -> Result<SampleMoments> {
    noise.validate()?;
    if trials < 2 {
        return Err(Error::invalid("need at least 2 trials"));
    }
    let k = noise.dim();
    let b = noise.batch_size;
    let shards: Vec<Welford> = shard_sizes(trials)
        .into_par_iter()
        .enumerate()
        .map(|(s, n)| {
            let mut rng = shard_rng(seed, s);
            let mut acc = Welford::new(k);
            let mut dw = vec![0.0; k];
            for _ in 0..n {
                for (i, out) in dw.iter_mut().enumerate() {
                    let mut sum = 0.0;
                    for _ in 0..b {
                        let z: f64 = rng.sample(StandardNormal);
                        sum += noise.grad_mean[i] + noise.sigma_g * z;
                    }
                    let g = sum / b as f64;
                    let kept = rng.random::<f64>() < noise.p;
                    *out = if kept { -noise.eta * g / noise.p } else { 0.0 };
                }
                acc.push(&dw);
            }
            acc
        })
        .collect();
    let total = shards.iter().fold(Welford::new(k), |a, s| a.merge(s));
    Ok(SampleMoments {
        trials,
        variance: total.m2.iter().map(|m| m / (total.n - 1.0)).collect(),
        mean: total.mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Loss increase that counts as escaping.
    pub epsilon: f64,
    /// Allowed escape probability / bound failure probability.
    pub delta: f64,
    /// Number of parameters.
    pub k: usize,
    /// Update variance per coordinate.
    pub sigma2: f64,
    /// Prior variance around the pretrained weights.
    pub sigma0_2: f64,
    pub w: Vec<f64>,
    pub w0: Vec<f64>,
    /// Training set size |S|.
    pub sample_count: usize,
}

impl BoundInputs {
    fn validate_escape(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.sigma2 > 0.0) {
            return Err(Error::Domain("need epsilon > 0 and sigma2 > 0".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.k == 0 {
            return Err(Error::Domain("k must be >= 1".into()));
        }
        Ok(())
    }

    fn validate_bound(&self) -> Result<f64> {
        self.validate_escape()?;
        check_len("bound inputs w", self.k, self.w.len())?;
        check_len("bound inputs w0", self.k, self.w0.len())?;
        if !(self.sigma0_2 > 0.0) || self.sample_count < 2 {
            return Err(Error::Domain("need sigma0_2 > 0 and |S| >= 2".into()));
        }
        let diff: Vec<f64> = self.w.iter().zip(&self.w0).map(|(a, b)| a - b).collect();
        let dist2 = l2_norm(&diff).powi(2);
        if !(self.k as f64 * self.sigma0_2 > dist2) {
            return Err(Error::Domain(format!(
                "k·sigma0² = {} must exceed ‖w - w0‖² = {dist2}",
                self.k as f64 * self.sigma0_2
            )));
        }
        Ok(dist2)
    }
}

/// Largest Hessian eigenvalue that keeps the escape probability at most δ:
/// `2ε / (F_k⁻¹(1-δ) σ²)`.
pub fn escape_rho_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate_escape()?;
    let q = chi2_quantile(inputs.k, 1.0 - inputs.delta)?;
    Ok(2.0 * inputs.epsilon / (q * inputs.sigma2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    /// `(kσ0² - ‖w - w0‖²) ε / (k F_k⁻¹(1-δ) σ²)`
    pub sharpness_term: f64,
    /// The σ-independent remainder R.
    pub remainder: f64,
}

impl GeneralizationBound {
    pub fn total(&self) -> f64 {
        self.sharpness_term + self.remainder
    }
}

pub fn generalization_bound(inputs: &BoundInputs) -> Result<GeneralizationBound> {
    let dist2 = inputs.validate_bound()?;
    let k = inputs.k as f64;
    let s = inputs.sample_count as f64;
    let q = chi2_quantile(inputs.k, 1.0 - inputs.delta)?;
    let slack = k * inputs.sigma0_2 - dist2;
    let sharpness_term = slack * inputs.epsilon / (k * q * inputs.sigma2);
    // ‖w - w0‖² / d² with d² = σ0² - ‖w - w0‖²/k
    let ratio = k * dist2 / slack;
    let inflate = (1.0 + (s.ln() / k).sqrt()).powi(2);
    let numerator = k * (1.0 + ratio * inflate).ln() + 4.0 * (s / inputs.delta).ln();
    let remainder = (numerator / (2.0 * (s - 1.0))).sqrt();
    Ok(GeneralizationBound {
        sharpness_term,
        remainder,
    })
}

/// Fraction of `trials` draws Δw ~ N(0, σ² I) with `½ Δwᵀ diag(h) Δw ≥ ε`.
pub fn escape_frequency(
    hessian_diag: &[f64],
    sigma2: f64,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if hessian_diag.is_empty() || trials == 0 || !(sigma2 > 0.0) {
        return Err(Error::invalid(
            "escape_frequency needs k >= 1, trials >= 1, sigma2 > 0",
        ));
    }
    let sigma = sigma2.sqrt();
    let hits: usize = shard_sizes(trials)
        .into_par_iter()
        .enumerate()
        .map(|(s, n)| {
            let mut rng = shard_rng(seed, s);
            (0..n)
                .filter(|_| {
                    let q: f64 = hessian_diag
                        .iter()
                        .map(|h| {
                            let z: f64 = rng.sample(StandardNormal);
                            h * (sigma * z).powi(2)
                        })
                        .sum();
                    0.5 * q >= epsilon
                })
                .count()
        })
        .sum();
    Ok(hits as f64 / trials as f64)
}

/// Rayleigh-quotient estimate of the largest-magnitude Hessian eigenvalue of
/// the objective whose gradient is `grad`, by power iteration with
/// `Hv ≈ (∇L(w + hv) - ∇L(w - hv)) / 2h`, `h = 1e-4 / ‖v‖`.
pub fn sharpness_power_iteration<G>(grad: G, params: &[f64], iters: usize, seed: u64) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 {
        return Err(Error::invalid("power iteration needs iters >= 1"));
    }
    let n = params.len();
    if n == 0 {
        return Err(Error::invalid(
            "power iteration needs at least one parameter",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64>;
    loop {
        v = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if l2_norm(&v) > 0.0 {
            break;
        }
    }
    let norm = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);

    let mut estimate = 0.0;
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for _ in 0..iters {
        let h = 1e-4 / l2_norm(&v);
        for i in 0..n {
            plus[i] = params[i] + h * v[i];
            minus[i] = params[i] - h * v[i];
        }
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        check_len("gradient oracle", n, gp.len())?;
        let hv: Vec<f64> = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        estimate = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>();
        let hv_norm = l2_norm(&hv);
        if !hv_norm.is_finite() {
            return Err(Error::NumericOverflow("Hessian-vector product".into()));
        }
        if hv_norm == 0.0 {
            return Ok(0.0);
        }
        v = hv.into_iter().map(|x| x / hv_norm).collect();
    }
    Ok(estimate)
}

/// [`sharpness_power_iteration`] on the model's mean training loss over `data`.
pub fn model_sharpness(
    model: &Model,
    params: &ParamVector,
    data: &Dataset,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    model.check_dataset(data)?;
    let graph = model.train_graph();
    let grad = |w: &[f64]| -> Result<Vec<f64>> {
        let probe = params.with_values(w.to_vec())?;
        Ok(forward_backward(graph, &probe, data)?.1)
    };
    sharpness_power_iteration(grad, params.values(), iters, seed)
}

/// One row of the closed-form vs Monte Carlo variance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub p: f64,
    pub batch_size: usize,
    pub eta: f64,
    pub sigma_g: f64,
    pub dim: usize,
    pub trials: usize,
    pub predicted_variance: f64,
    /// Average over coordinates of the per-coordinate sample variance.
    pub empirical_variance: f64,
    /// Worst per-coordinate |empirical - predicted| / predicted.
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceGrid {
    pub ps: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub etas: Vec<f64>,
    pub sigma_g: f64,
    pub dim: usize,
    pub trials: usize,
}

impl Default for VarianceGrid {
    fn default() -> Self {
        Self {
            ps: vec![0.2, 0.5, 1.0],
            batch_sizes: vec![1, 4, 16],
            etas: vec![0.1],
            sigma_g: 1.0,
            dim: 4,
            trials: 100_000,
        }
    }
}

/// Variance table at a local minimum (zero mean gradient) over the grid.
pub fn variance_table(grid: &VarianceGrid, seed: u64) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for &eta in &grid.etas {
        for &p in &grid.ps {
            for &b in &grid.batch_sizes {
                let noise = NoiseModel {
                    grad_mean: vec![0.0; grid.dim],
                    sigma_g: grid.sigma_g,
                    batch_size: b,
                    p,
                    eta,
                };
                let (_, predicted) = theorem1_covariance(&noise)?;
                let sim = simulate_update_covariance(&noise, grid.trials, seed.wrapping_add(cell))?;
                cell += 1;
                let max_rel = sim
                    .variance
                    .iter()
                    .zip(&predicted)
                    .map(|(e, p)| (e - p).abs() / p)
                    .fold(0.0, f64::max);
                rows.push(VarianceRow {
                    p,
                    batch_size: b,
                    eta,
                    sigma_g: grid.sigma_g,
                    dim: grid.dim,
                    trials: grid.trials,
                    predicted_variance: predicted[0],
                    empirical_variance: sim.variance.iter().sum::<f64>() / grid.dim as f64,
                    max_relative_error: max_rel,
                });
            }
        }
    }
    Ok(rows)
}

/// Scalar description of a bound table: `w0 = 0` and `w` at Euclidean
/// distance `distance` from it along the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundGrid {
    pub epsilon: f64,
    pub delta: f64,
    pub k: usize,
    pub sigma0_2: f64,
    pub distance: f64,
    pub sample_count: usize,
    pub sigma2s: Vec<f64>,
    pub trials: usize,
}

impl Default for BoundGrid {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            delta: 0.05,
            k: 10,
            sigma0_2: 1.0,
            distance: 1.0,
            sample_count: 1000,
            sigma2s: vec![0.001, 0.003, 0.01, 0.03, 0.1],
            trials: 100_000,
        }
    }
}

impl BoundGrid {
    pub fn inputs(&self) -> BoundInputs {
        let c = self.distance / (self.k.max(1) as f64).sqrt();
        BoundInputs {
            epsilon: self.epsilon,
            delta: self.delta,
            k: self.k,
            sigma2: self.sigma2s.first().copied().unwrap_or(1.0),
            sigma0_2: self.sigma0_2,
            w: vec![c; self.k],
            w0: vec![0.0; self.k],
            sample_count: self.sample_count,
        }
    }

    pub fn table(&self, seed: u64) -> Result<Vec<BoundRow>> {
        bound_table(&self.inputs(), &self.sigma2s, self.trials, seed)
    }
}

/// One row of the escape / generalization bound table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub sigma2: f64,
    pub rho_max: f64,
    /// Monte Carlo escape frequency with H = rho_max · I.
    pub escape_frequency: f64,
    pub delta: f64,
    pub sharpness_term: f64,
    pub remainder: f64,
    pub bound: f64,
}

/// Bound quantities over a grid of update variances; every other input is
/// taken from `base`.
pub fn bound_table(
    base: &BoundInputs,
    sigma2s: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<BoundRow>> {
    let mut rows = Vec::with_capacity(sigma2s.len());
    for (i, &sigma2) in sigma2s.iter().enumerate() {
        let inputs = BoundInputs {
            sigma2,
            ..base.clone()
        };
        let rho = escape_rho_bound(&inputs)?;
        let freq = escape_frequency(
            &vec![rho; inputs.k],
            sigma2,
            inputs.epsilon,
            trials,
            seed.wrapping_add(i as u64),
        )?;
        let gb = generalization_bound(&inputs)?;
        rows.push(BoundRow {
            sigma2,
            rho_max: rho,
            escape_frequency: freq,
            delta: inputs.delta,
            sharpness_term: gb.sharpness_term,
            remainder: gb.remainder,
            bound: gb.total(),
        });
    }
    Ok(rows)
}
