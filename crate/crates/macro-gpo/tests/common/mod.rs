//! Independent oracles for the integration suites: a naive dense-inverse GP,
//! determinant expansion, Gauss-Hermite quadrature, the Bayes-optimal value
//! recursion for single-location actions, and a brute-force Lipschitz
//! recursion. None of this shares code with the library's solve paths.

#![allow(dead_code)]

use macro_gpo::gp::Location;

/// Hyperparameters mirrored locally so the oracle does not depend on the
/// library's kernel path.
#[derive(Debug, Clone)]
pub struct OracleParams {
    pub prior_mean: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub length_scales: Vec<f64>,
}

pub fn se_kernel(a: &[f64], b: &[f64], p: &OracleParams) -> f64 {
    let mut q = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(&p.length_scales) {
        let d = (x - y) / l;
        q += d * d;
    }
    p.signal_variance * (-0.5 * q).exp()
}

/// Gauss-Jordan inversion with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("nonempty");
        m.swap(col, pivot);
        let p = m[col][col];
        assert!(p.abs() > 0.0, "singular matrix in oracle inversion");
        for j in 0..2 * n {
            m[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    for j in 0..2 * n {
                        m[i][j] -= f * m[col][j];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Laplace-expansion determinant; fine for the small matrices oracles use.
pub fn determinant(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    if n == 1 {
        return a[0][0];
    }
    let mut det = 0.0;
    for (j, lead) in a[0].iter().enumerate() {
        if *lead == 0.0 {
            continue;
        }
        let minor: Vec<Vec<f64>> = a[1..]
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(c, _)| *c != j)
                    .map(|(_, v)| *v)
                    .collect()
            })
            .collect();
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * lead * determinant(&minor);
    }
    det
}

/// Measurement gram over a location list: kernel plus noise on the diagonal.
pub fn gram(locs: &[Vec<f64>], p: &OracleParams) -> Vec<Vec<f64>> {
    let n = locs.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    se_kernel(&locs[i], &locs[j], p)
                        + if i == j { p.noise_variance } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

/// Posterior over noisy outputs by explicitly forming the gram inverse.
pub fn naive_posterior(
    targets: &[Vec<f64>],
    data_locs: &[Vec<f64>],
    data_z: &[f64],
    p: &OracleParams,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = targets.len();
    let target_gram: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    se_kernel(&targets[i], &targets[j], p)
                        + if i == j { p.noise_variance } else { 0.0 }
                })
                .collect()
        })
        .collect();
    if data_locs.is_empty() {
        return (vec![p.prior_mean; k], target_gram);
    }
    let inv = invert(&gram(data_locs, p));
    let n = data_locs.len();
    let cross: Vec<Vec<f64>> = (0..k)
        .map(|t| {
            (0..n)
                .map(|i| se_kernel(&targets[t], &data_locs[i], p))
                .collect()
        })
        .collect();
    let centered: Vec<f64> = data_z.iter().map(|z| z - p.prior_mean).collect();
    let mut mean = vec![p.prior_mean; k];
    for t in 0..k {
        for i in 0..n {
            for j in 0..n {
                mean[t] += cross[t][i] * inv[i][j] * centered[j];
            }
        }
    }
    let mut cov = target_gram;
    for s in 0..k {
        for t in 0..k {
            for i in 0..n {
                for j in 0..n {
                    cov[s][t] -= cross[s][i] * inv[i][j] * cross[t][j];
                }
            }
        }
    }
    (mean, cov)
}

/// Scalar posterior of one target under single-location (kappa = 1) data.
pub fn naive_posterior_scalar(
    target: &[f64],
    data_locs: &[Vec<f64>],
    data_z: &[f64],
    p: &OracleParams,
) -> (f64, f64) {
    let (m, c) = naive_posterior(&[target.to_vec()], data_locs, data_z, p);
    (m[0], c[0][0])
}

/// Frobenius norm of the regression-weight matrix, via the explicit inverse.
pub fn naive_alpha(prefix: &[Vec<f64>], action: &[Vec<f64>], p: &OracleParams) -> f64 {
    if prefix.is_empty() {
        return 0.0;
    }
    let inv = invert(&gram(prefix, p));
    let n = prefix.len();
    let mut sq = 0.0;
    for target in action {
        let cross: Vec<f64> = (0..n)
            .map(|i| se_kernel(target, &prefix[i], p))
            .collect();
        for j in 0..n {
            let mut w = 0.0;
            for i in 0..n {
                w += cross[i] * inv[i][j];
            }
            sq += w * w;
        }
    }
    sq.sqrt()
}

/// Gauss-Hermite rule (physicists' weight e^{-x^2}) built from the
/// orthonormal recurrence applied to scaled Hermite functions
/// q_k(x) = p_k(x) e^{-x^2/2}: same roots, no overflow at large n. Roots by
/// sign-scan plus bisection, weights as Christoffel numbers
/// w_i = e^{-x_i^2} / sum_k q_k(x_i)^2. Self-checked in the suites against
/// known moments; the kink error of the rule decays like 1/n.
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// q_n(x) with the shared three-term recurrence.
fn hermite_fn(n: usize, x: f64) -> f64 {
    let mut q_prev = 0.0;
    let mut q = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    for k in 0..n {
        let next =
            x * (2.0 / (k as f64 + 1.0)).sqrt() * q - (k as f64 / (k as f64 + 1.0)).sqrt() * q_prev;
        q_prev = q;
        q = next;
    }
    q
}

/// sum_{k=0}^{n-1} q_k(x)^2 in one recurrence pass.
fn hermite_fn_sumsq(n: usize, x: f64) -> f64 {
    let mut q_prev = 0.0;
    let mut q = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    let mut s = q * q;
    for k in 0..n - 1 {
        let next =
            x * (2.0 / (k as f64 + 1.0)).sqrt() * q - (k as f64 / (k as f64 + 1.0)).sqrt() * q_prev;
        q_prev = q;
        q = next;
        s += q * q;
    }
    s
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        // Above ~512 nodes the scaled recurrence underflows before the
        // outermost roots; the suites never need more (kink error ~ 1/n).
        assert!((2..=512).contains(&n));
        let bound = (2.0 * n as f64 + 2.0).sqrt();
        let scan = 40 * n;
        let mut nodes = Vec::with_capacity(n);
        let mut prev_x = -bound;
        let mut prev_v = hermite_fn(n, prev_x);
        for i in 1..=scan {
            let x = -bound + 2.0 * bound * i as f64 / scan as f64;
            let v = hermite_fn(n, x);
            if prev_v == 0.0 {
                // Exact zero on the grid (possible only in the far tail
                // where q underflows): skip, the sign change will register
                // once q is representable.
            } else if prev_v.signum() != v.signum() && v != 0.0 {
                let (mut lo, mut hi) = (prev_x, x);
                let mut flo = prev_v;
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    let fm = hermite_fn(n, mid);
                    if fm == 0.0 {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if flo.signum() == fm.signum() {
                        lo = mid;
                        flo = fm;
                    } else {
                        hi = mid;
                    }
                }
                nodes.push(0.5 * (lo + hi));
            }
            prev_x = x;
            prev_v = v;
        }
        assert_eq!(nodes.len(), n, "root scan missed Hermite roots");
        let weights = nodes
            .iter()
            .map(|&x| (-x * x).exp() / hermite_fn_sumsq(n, x))
            .collect();
        GaussHermite { nodes, weights }
    }

    /// E[f(Z)] for Z ~ N(mu, sigma^2).
    pub fn expect(&self, mu: f64, sigma: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let c = std::f64::consts::PI.sqrt().recip();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mu + std::f64::consts::SQRT_2 * sigma * x);
        }
        c * acc
    }
}

/// A tiny single-location-action world for the Bayes-optimal oracle: each
/// anchor key maps to candidate next locations.
pub struct ScalarWorld {
    pub params: OracleParams,
    pub beta: f64,
    pub actions: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Sync>,
}

impl ScalarWorld {
    pub fn reward(&self, action: &[f64], data_locs: &[Vec<f64>], data_z: &[f64]) -> f64 {
        let (mu, var) = naive_posterior_scalar(action, data_locs, data_z, &self.params);
        mu + self.beta * 0.5 * (1.0 + var / self.params.noise_variance).ln()
    }

    /// Q*_t by exact recursion with Gauss-Hermite over each scalar
    /// measurement integral.
    pub fn q_star(
        &self,
        gh: &GaussHermite,
        action: &[f64],
        data_locs: &[Vec<f64>],
        data_z: &[f64],
        stage: usize,
        horizon: usize,
    ) -> f64 {
        let (mu, var) = naive_posterior_scalar(action, data_locs, data_z, &self.params);
        let r = mu + self.beta * 0.5 * (1.0 + var / self.params.noise_variance).ln();
        if stage + 1 >= horizon {
            return r;
        }
        let mut locs = data_locs.to_vec();
        locs.push(action.to_vec());
        let expected = gh.expect(mu, var.sqrt(), |z| {
            let mut zs = data_z.to_vec();
            zs.push(z);
            self.v_star(gh, action, &locs, &zs, stage + 1, horizon)
        });
        r + expected
    }

    pub fn v_star(
        &self,
        gh: &GaussHermite,
        anchor: &[f64],
        data_locs: &[Vec<f64>],
        data_z: &[f64],
        stage: usize,
        horizon: usize,
    ) -> f64 {
        if stage >= horizon {
            return 0.0;
        }
        (self.actions)(anchor)
            .iter()
            .map(|a| self.q_star(gh, a, data_locs, data_z, stage, horizon))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Brute-force value-Lipschitz recursion (Definition-style) on top of the
/// naive alpha: L_H = 0; L_t = max over actions of
/// sqrt(kappa) alpha + L_{t+1} sqrt(1 + alpha^2).
pub fn brute_force_lipschitz(
    prefix: &mut Vec<Vec<f64>>,
    anchor: &[f64],
    actions: &dyn Fn(&[f64]) -> Vec<Vec<Vec<f64>>>,
    p: &OracleParams,
    stage: usize,
    horizon: usize,
) -> f64 {
    if stage >= horizon {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for action in actions(anchor) {
        let kappa = action.len() as f64;
        let a = naive_alpha(prefix, &action, p);
        let len_before = prefix.len();
        prefix.extend(action.iter().cloned());
        let next = brute_force_lipschitz(
            prefix,
            action.last().expect("nonempty action"),
            actions,
            p,
            stage + 1,
            horizon,
        );
        prefix.truncate(len_before);
        best = best.max(kappa.sqrt() * a + next * (1.0 + a * a).sqrt());
    }
    best
}

pub fn loc2(x: f64, y: f64) -> Location {
    Location::new(vec![x, y])
}

/// One-sided sign-test p-value: probability of at least `wins` successes in
/// `n` fair coin flips. Exact binomial tail up to n = 500 (0.5^n underflows
/// past ~1074), normal approximation with continuity correction beyond.
pub fn sign_test_p(wins: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if n <= 500 {
        let mut term = 0.5f64.powi(n as i32);
        let mut acc = 0.0;
        for k in 0..=n {
            if k >= wins {
                acc += term;
            }
            if k < n {
                term *= (n - k) as f64 / (k + 1) as f64;
            }
        }
        return acc.min(1.0);
    }
    let z = (wins as f64 - 0.5 - n as f64 / 2.0) / (n as f64 / 4.0).sqrt();
    0.5 * erfc_oracle(z / std::f64::consts::SQRT_2)
}

/// erfc via the complementary series/continued-fraction split; plenty for
/// p-value work.
fn erfc_oracle(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc_oracle(-x);
    }
    if x < 3.0 {
        // 1 - erf(x) with the Taylor series of erf.
        let mut term = x;
        let mut acc = x;
        for k in 1..300 {
            term *= -x * x / k as f64;
            acc += term / (2 * k + 1) as f64;
        }
        1.0 - acc * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // Asymptotic expansion, accurate past 3.
        let mut sum = 1.0;
        let mut term = 1.0;
        for k in 1..8 {
            term *= -(2.0 * k as f64 - 1.0) / (2.0 * x * x);
            sum += term;
        }
        (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) * sum
    }
}

use macro_gpo::env::{MacroAction, MacroActionCatalog};
use macro_gpo::gp::{KernelParams, ObservationSet};

/// A randomized kappa = 1, A = 2 instance shared by the library planners and
/// the scalar oracle: two next-location offsets applied from any anchor.
pub struct ScalarInstance {
    pub params: KernelParams,
    pub catalog: MacroActionCatalog,
    pub anchor: Location,
    pub data: ObservationSet,
    pub beta: f64,
    offsets: [(f64, f64); 2],
}

impl ScalarInstance {
    pub fn oracle_params(&self) -> OracleParams {
        OracleParams {
            prior_mean: self.params.prior_mean,
            signal_variance: self.params.signal_variance,
            noise_variance: self.params.noise_variance,
            length_scales: self.params.length_scales.clone(),
        }
    }

    pub fn world(&self) -> ScalarWorld {
        let offsets = self.offsets;
        ScalarWorld {
            params: self.oracle_params(),
            beta: self.beta,
            actions: Box::new(move |anchor: &[f64]| {
                offsets
                    .iter()
                    .map(|(dx, dy)| vec![anchor[0] + dx, anchor[1] + dy])
                    .collect()
            }),
        }
    }

    pub fn data_locs(&self) -> Vec<Vec<f64>> {
        self.data
            .locations()
            .iter()
            .map(|l| l.coords().to_vec())
            .collect()
    }

    pub fn data_z(&self) -> Vec<f64> {
        self.data.measurements().to_vec()
    }
}

/// Deterministic pseudo-random scalar in [lo, hi) from a seed and tag.
fn jitter(seed: u64, tag: u64, lo: f64, hi: f64) -> f64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    lo + (hi - lo) * (z as f64 / u64::MAX as f64)
}

pub fn scalar_instance(seed: u64, horizon: usize, beta: f64) -> ScalarInstance {
    let params = KernelParams {
        prior_mean: 0.0,
        signal_variance: jitter(seed, 1, 0.5, 1.5),
        noise_variance: jitter(seed, 2, 0.05, 0.3),
        length_scales: vec![jitter(seed, 3, 0.8, 1.6), jitter(seed, 4, 0.8, 1.6)],
    };
    let offsets = [
        (jitter(seed, 5, 0.6, 1.4), jitter(seed, 6, -0.3, 0.3)),
        (jitter(seed, 7, -0.3, 0.3), jitter(seed, 8, 0.6, 1.4)),
    ];
    let anchor = loc2(0.0, 0.0);
    // Enumerate every anchor reachable within the horizon.
    let mut anchors: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut frontier = vec![(0.0, 0.0)];
    for _ in 0..horizon {
        let mut next = Vec::new();
        for (x, y) in frontier {
            for (dx, dy) in &offsets {
                let t = (x + dx, y + dy);
                if !anchors.iter().any(|a| a == &t) {
                    anchors.push(t);
                    next.push(t);
                }
            }
        }
        frontier = next;
    }
    let entries: Vec<(Location, Vec<MacroAction>)> = anchors
        .iter()
        .map(|(x, y)| {
            let acts = offsets
                .iter()
                .map(|(dx, dy)| {
                    MacroAction::new(vec![loc2(x + dx, y + dy)]).expect("single step")
                })
                .collect();
            (loc2(*x, *y), acts)
        })
        .collect();
    let catalog = MacroActionCatalog::explicit(entries, 1).expect("valid explicit catalog");
    let extra = loc2(jitter(seed, 9, -1.0, 1.0), jitter(seed, 10, -1.0, 1.0));
    let data = ObservationSet::new(
        vec![extra, anchor.clone()],
        vec![jitter(seed, 11, -1.0, 1.0), jitter(seed, 12, -1.0, 1.0)],
    )
    .expect("lengths match");
    ScalarInstance {
        params,
        catalog,
        anchor,
        data,
        beta,
        offsets,
    }
}
