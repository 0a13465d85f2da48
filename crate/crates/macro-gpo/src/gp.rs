//! Gaussian-process belief engine: squared-exponential kernel, posterior
//! inference over the noisy outputs of candidate input locations, correlated
//! sampling through the Cholesky factor, and the log-determinant information
//! gain consumed by the stage reward.
//!
//! Beliefs here are over noisy measurements z, not the latent field: every
//! gram matrix carries the noise variance on its diagonal, for the
//! conditioning block and the target block alike.

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use rand_chacha::ChaCha12Rng;

/// Hyperparameters of the squared-exponential GP with per-axis length-scales.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    /// Constant prior mean over the domain, in measurement units.
    pub prior_mean: f64,
    /// Signal variance (intensity of the latent field).
    pub signal_variance: f64,
    /// Additive i.i.d. measurement noise variance; must be positive.
    pub noise_variance: f64,
    /// One positive length-scale per input dimension.
    pub length_scales: Vec<f64>,
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0) {
            return Err(Error::invalid(format!(
                "noise_variance must be > 0, got {}",
                self.noise_variance
            )));
        }
        if self.signal_variance < 0.0 {
            return Err(Error::invalid(format!(
                "signal_variance must be >= 0, got {}",
                self.signal_variance
            )));
        }
        if self.length_scales.is_empty() || self.length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::invalid(
                "length_scales must be nonempty and positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }
}

/// An input location: a fixed-length coordinate vector in domain units.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    coords: Vec<f64>,
}

impl Location {
    pub fn new(coords: Vec<f64>) -> Self {
        Location { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Exact-bit key for hashing; -0.0 is normalized to +0.0.
    pub fn key(&self) -> Vec<u64> {
        self.coords
            .iter()
            .map(|c| (if *c == 0.0 { 0.0f64 } else { *c }).to_bits())
            .collect()
    }

    /// Total order on coordinates, used for deterministic tie-breaking.
    pub fn total_cmp(&self, other: &Location) -> std::cmp::Ordering {
        for (a, b) in self.coords.iter().zip(other.coords.iter()) {
            let c = a.total_cmp(b);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        self.coords.len().cmp(&other.coords.len())
    }
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// The observation history: visited input locations and the corresponding
/// noisy measurements, growing by blocks of kappa after the prior stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    locations: Vec<Location>,
    measurements: Vec<f64>,
}

impl ObservationSet {
    pub fn new(locations: Vec<Location>, measurements: Vec<f64>) -> Result<Self> {
        if locations.len() != measurements.len() {
            return Err(Error::invalid(format!(
                "observation set has {} locations but {} measurements",
                locations.len(),
                measurements.len()
            )));
        }
        Ok(ObservationSet {
            locations,
            measurements,
        })
    }

    pub fn empty() -> Self {
        ObservationSet::default()
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn measurements(&self) -> &[f64] {
        &self.measurements
    }

    /// Append one executed macro-action's observations.
    pub fn push_block(&mut self, locations: &[Location], measurements: &[f64]) -> Result<()> {
        if locations.len() != measurements.len() {
            return Err(Error::invalid(
                "block locations and measurements differ in length".to_string(),
            ));
        }
        self.locations.extend_from_slice(locations);
        self.measurements.extend_from_slice(measurements);
        Ok(())
    }

    /// Last visited location: the agent's current anchor.
    pub fn anchor(&self) -> Option<&Location> {
        self.locations.last()
    }
}

/// Gaussian belief over the noisy outputs of kappa candidate locations.
#[derive(Debug, Clone)]
pub struct PosteriorBelief {
    mean: Vec<f64>,
    covariance: Matrix,
    chol: Matrix,
}

impl PosteriorBelief {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    /// Lower-triangular factor with chol * chol^T = covariance.
    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Squared-exponential covariance between two locations (no noise term; the
/// Kronecker noise addition is the gram builders' job).
pub fn kernel_cov(a: &Location, b: &Location, params: &KernelParams) -> Result<f64> {
    if a.dim() != params.dim() || b.dim() != params.dim() {
        return Err(Error::invalid(format!(
            "kernel_cov dimension mismatch: locations {}d/{}d vs {} length-scales",
            a.dim(),
            b.dim(),
            params.dim()
        )));
    }
    Ok(kernel_unchecked(a, b, params))
}

#[inline]
pub(crate) fn kernel_unchecked(a: &Location, b: &Location, params: &KernelParams) -> f64 {
    let mut q = 0.0;
    for ((x, y), l) in a
        .coords()
        .iter()
        .zip(b.coords())
        .zip(&params.length_scales)
    {
        let d = (x - y) / l;
        q += d * d;
    }
    params.signal_variance * (-0.5 * q).exp()
}

/// Relative jitter applied once to the diagonal if a factorization fails.
/// With positive noise variance a failure is a pure floating-point event.
const JITTER_REL: f64 = 1e-10;

/// Factor a measurement gram (noise already on the diagonal), retrying once
/// with jitter before giving up with diagnostics.
pub(crate) fn factor_gram(
    n: usize,
    sym: &dyn Fn(usize, usize) -> f64,
    params: &KernelParams,
) -> Result<Cholesky> {
    match Cholesky::factor(n, sym) {
        Ok(c) => Ok(c),
        Err(first) => {
            let jitter = JITTER_REL * params.signal_variance.max(params.noise_variance);
            match Cholesky::factor(n, |i, j| sym(i, j) + if i == j { jitter } else { 0.0 }) {
                Ok(c) => Ok(c),
                Err(second) => Err(Error::numerical(format!(
                    "gram factorization failed at pivot {}/{} (residual {:.3e}); \
                     retry with jitter {:.3e} failed at pivot {} (residual {:.3e})",
                    first.pivot, n, first.residual, jitter, second.pivot, second.residual
                ))),
            }
        }
    }
}

/// Build the conditioning gram entry (i, j) for an observation set:
/// sigma_{ss'} plus noise on the diagonal (per-measurement, index-based).
pub(crate) fn gram_entry(
    locs: &[Location],
    i: usize,
    j: usize,
    params: &KernelParams,
) -> f64 {
    let v = kernel_unchecked(&locs[i], &locs[j], params);
    if i == j {
        v + params.noise_variance
    } else {
        v
    }
}

/// Posterior belief over the noisy outputs at `targets` given `data`.
///
/// The prior mean is handled by centering: it is subtracted from the
/// measurements before solving and added back to the posterior mean. Empty
/// data returns the prior belief (gram over targets plus noise diagonal).
pub fn posterior(
    targets: &[Location],
    data: &ObservationSet,
    params: &KernelParams,
) -> Result<PosteriorBelief> {
    params.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("posterior needs at least one target"));
    }
    for l in targets.iter().chain(data.locations()) {
        if l.dim() != params.dim() {
            return Err(Error::invalid(format!(
                "location dimension {} does not match kernel dimension {}",
                l.dim(),
                params.dim()
            )));
        }
    }
    let k = targets.len();
    let n = data.len();

    // Target gram with noise on its diagonal.
    let target_gram = Matrix::from_fn(k, k, |i, j| {
        let v = kernel_unchecked(&targets[i], &targets[j], params);
        if i == j {
            v + params.noise_variance
        } else {
            v
        }
    });

    if n == 0 {
        let chol = factor_small_cov(&target_gram, params)?;
        return Ok(PosteriorBelief {
            mean: vec![params.prior_mean; k],
            covariance: target_gram,
            chol,
        });
    }

    let locs = data.locations();
    let cond = factor_gram(n, &|i, j| gram_entry(locs, i, j, params), params)?;

    // W column t = L^{-1} cross(target t, data).
    let mut w = Matrix::zeros(n, k);
    for t in 0..k {
        let mut col: Vec<f64> = (0..n)
            .map(|i| kernel_unchecked(&targets[t], &locs[i], params))
            .collect();
        cond.solve_lower_in_place(&mut col);
        for i in 0..n {
            w.set(i, t, col[i]);
        }
    }

    // Whitened centered measurements u = L^{-1} (z - prior).
    let mut u: Vec<f64> = data
        .measurements()
        .iter()
        .map(|z| z - params.prior_mean)
        .collect();
    cond.solve_lower_in_place(&mut u);

    let mean: Vec<f64> = (0..k)
        .map(|t| {
            let mut s = params.prior_mean;
            for i in 0..n {
                s += w.at(i, t) * u[i];
            }
            s
        })
        .collect();

    let covariance = Matrix::from_fn(k, k, |i, j| {
        let mut s = target_gram.at(i, j);
        for r in 0..n {
            s -= w.at(r, i) * w.at(r, j);
        }
        s
    });

    let chol = factor_small_cov(&covariance, params)?;
    Ok(PosteriorBelief {
        mean,
        covariance,
        chol,
    })
}

/// Factor a small posterior covariance block with the same jitter policy.
pub(crate) fn factor_small_cov(cov: &Matrix, params: &KernelParams) -> Result<Matrix> {
    if !cov.is_finite() {
        return Err(Error::numerical(
            "posterior covariance has non-finite entries",
        ));
    }
    let c = factor_gram(cov.rows(), &|i, j| cov.at(i, j), params)?;
    Ok(c.to_dense())
}

/// Draw `n` correlated output vectors: z = mean + chol * x with x standard
/// normal. Deterministic given the rng state.
pub fn sample_outputs(belief: &PosteriorBelief, n: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    let k = belief.dim();
    (0..n)
        .map(|_| {
            let x = crate::rng::standard_normals(rng, k);
            sample_with_innovation(belief, &x)
        })
        .collect()
}

/// z = mean + chol * x for an explicit innovation vector. This is the seam
/// the planners use so stochastic and most-likely recursions share one code
/// path (x = 0 collapses to the posterior mean exactly).
pub fn sample_with_innovation(belief: &PosteriorBelief, x: &[f64]) -> Vec<f64> {
    let k = belief.dim();
    debug_assert_eq!(x.len(), k);
    let mut z = belief.mean.clone();
    for i in 0..k {
        let mut s = 0.0;
        for j in 0..=i {
            s += belief.chol.at(i, j) * x[j];
        }
        z[i] += s;
    }
    z
}

/// Information gain of observing the belief's outputs:
/// 0.5 log |I + sigma_n^{-2} Sigma|, computed through a Cholesky of the
/// shifted matrix. Always nonnegative since the diagonal of Sigma carries at
/// least the noise variance.
pub fn info_gain(belief: &PosteriorBelief, noise_variance: f64) -> Result<f64> {
    if !(noise_variance > 0.0) {
        return Err(Error::invalid("noise_variance must be > 0"));
    }
    let k = belief.dim();
    let inv = 1.0 / noise_variance;
    let shifted =
        Cholesky::factor(k, |i, j| {
            let v = belief.covariance.at(i, j) * inv;
            if i == j {
                1.0 + v
            } else {
                v
            }
        })
        .map_err(|b| {
            Error::numerical(format!(
                "info_gain factorization failed at pivot {} (residual {:.3e})",
                b.pivot, b.residual
            ))
        })?;
    let v = 0.5 * shifted.logdet();
    if !v.is_finite() {
        return Err(Error::numerical("info_gain is not finite"));
    }
    // Tiny negatives are rounding; anything materially below zero is a bug.
    if v < -1e-12 {
        return Err(Error::numerical(format!("info_gain negative: {v}")));
    }
    Ok(v.max(0.0))
}
