//! The exact planners: stage reward, Lipschitz/theta/K calculators, the
//! sample-size formula, the stochastic and most-likely value recursions, and
//! the epsilon policy that arbitrates between them.

use crate::env::MacroAction;
use crate::error::{Error, Result};
use crate::gp::{self, KernelParams, Location, ObservationSet};
use crate::linalg::dot;
use crate::rng;
use crate::tables::{PrefixTables, DEFAULT_PREFIX_CAP};
use std::sync::atomic::{AtomicU64, Ordering};

/// Default cap on stochastic-tree Q evaluations, compared against
/// (A * N)^H before planning starts.
pub const DEFAULT_EVAL_CAP: f64 = 1e8;

/// What drives the per-stage sample count N.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleBudget {
    /// Pin N directly; the per-stage error bound lambda is recovered by
    /// numerically inverting the sample-size formula (delta defaults to 0.1).
    Fixed(usize),
    /// Derive lambda = eps/(4H^2) and delta = eps/(8 theta H) from a total
    /// loss bound, then N from the formula.
    LossBound { epsilon: f64 },
    /// Specify the per-stage bound and failure probability directly.
    StageBound { lambda: f64, delta: f64 },
}

/// Failure probability assumed when the caller pins N instead of epsilon.
pub const DEFAULT_DELTA_FOR_FIXED_N: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    /// Lookahead stages H >= 1.
    pub horizon: usize,
    /// Exploration weight on the information-gain term.
    pub beta: f64,
    pub budget: SampleBudget,
    pub seed: u64,
    /// Cap on reachable-prefix enumeration.
    pub prefix_cap: usize,
    /// Cap on (A*N)^H.
    pub eval_cap: f64,
}

impl PlannerConfig {
    pub fn new(horizon: usize, beta: f64, budget: SampleBudget, seed: u64) -> Self {
        PlannerConfig {
            horizon,
            beta,
            budget,
            seed,
            prefix_cap: DEFAULT_PREFIX_CAP,
            eval_cap: DEFAULT_EVAL_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        if self.beta < 0.0 {
            return Err(Error::invalid("beta must be >= 0"));
        }
        match &self.budget {
            SampleBudget::Fixed(n) if *n == 0 => {
                Err(Error::invalid("N must be >= 1"))
            }
            SampleBudget::LossBound { epsilon } if !(*epsilon > 0.0) => {
                Err(Error::invalid("epsilon must be > 0"))
            }
            SampleBudget::StageBound { lambda, delta }
                if !(*lambda > 0.0) || !(*delta > 0.0 && *delta < 1.0) =>
            {
                Err(Error::invalid(
                    "lambda must be > 0 and delta in (0, 1)",
                ))
            }
            _ => Ok(()),
        }
    }
}

/// N, lambda, delta as actually used for one planning state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedSampling {
    pub n: usize,
    pub lambda: f64,
    pub delta: f64,
    pub theta: f64,
    pub k: f64,
}

/// Sample count sufficient for the per-stage concentration bound:
/// N = ceil( (4 K^2 / lambda^2) * (H ln(4 K^2 H A / (e lambda^2)) + ln(2/delta)) ).
///
/// K = 0 means no downstream value sensitivity at all (e.g. H = 1), in which
/// case a single sample is vacuously enough.
pub fn sample_size(lambda: f64, delta: f64, k: f64, horizon: usize, a_max: usize) -> Result<usize> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    if k == 0.0 {
        return Ok(1);
    }
    let h = horizon as f64;
    let a = a_max.max(1) as f64;
    let k2 = k * k;
    let l2 = lambda * lambda;
    let inner = (4.0 * k2 * h * a / (std::f64::consts::E * l2)).ln();
    let raw = (4.0 * k2 / l2) * (h * inner + (2.0 / delta).ln());
    if !raw.is_finite() {
        return Err(Error::numerical(format!("sample size overflowed: {raw}")));
    }
    Ok(raw.ceil().max(1.0) as usize)
}

/// Invert the sample-size formula for lambda given a pinned N: the smallest
/// lambda whose prescribed sample count fits within n. Pinning N instead of
/// epsilon may therefore yield a loose bound.
pub fn lambda_for_sample_count(
    n: usize,
    delta: f64,
    k: f64,
    horizon: usize,
    a_max: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    if k == 0.0 {
        return Ok(0.0);
    }
    let fits = |lambda: f64| -> Result<bool> {
        Ok(sample_size(lambda, delta, k, horizon, a_max)? <= n)
    };
    let mut hi = k.max(1.0);
    let mut grow = 0;
    while !fits(hi)? {
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::numerical(
                "lambda inversion failed to bracket",
            ));
        }
    }
    let mut lo = hi * 1e-12;
    if fits(lo)? {
        return Ok(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fits(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Resolve N/lambda/delta for a planning state from whichever quantity the
/// config pins.
pub fn resolve_sampling(
    config: &PlannerConfig,
    tables: &PrefixTables,
    a_max: usize,
) -> Result<ResolvedSampling> {
    config.validate()?;
    let theta = tables.theta_max();
    let k = tables.k_max();
    let h = config.horizon;
    let (n, lambda, delta) = match &config.budget {
        SampleBudget::Fixed(n) => {
            let delta = DEFAULT_DELTA_FOR_FIXED_N;
            let lambda = lambda_for_sample_count(*n, delta, k, h, a_max)?;
            (*n, lambda, delta)
        }
        SampleBudget::LossBound { epsilon } => {
            let lambda = epsilon / (4.0 * (h * h) as f64);
            let delta = if theta > 0.0 {
                (epsilon / (8.0 * theta * h as f64)).min(0.5)
            } else {
                0.5
            };
            let n = sample_size(lambda, delta, k, h, a_max)?;
            (n, lambda, delta)
        }
        SampleBudget::StageBound { lambda, delta } => {
            (sample_size(*lambda, *delta, k, h, a_max)?, *lambda, *delta)
        }
    };
    Ok(ResolvedSampling {
        n,
        lambda,
        delta,
        theta,
        k,
    })
}

/// Stage reward of executing `action` given `data`:
/// R = 1^T mu + beta * 0.5 log |I + sigma_n^{-2} Sigma|.
pub fn reward(
    action: &MacroAction,
    data: &ObservationSet,
    params: &KernelParams,
    beta: f64,
) -> Result<f64> {
    let belief = gp::posterior(action.path(), data, params)?;
    let ig = gp::info_gain(&belief, params.noise_variance)?;
    Ok(belief.mean().iter().sum::<f64>() + beta * ig)
}

/// Reward-Lipschitz coefficient: the Frobenius norm of the regression-weight
/// matrix of `action`'s outputs on the `prefix` measurements. Zero for an
/// empty prefix.
pub fn alpha(prefix: &[Location], action: &MacroAction, params: &KernelParams) -> Result<f64> {
    params.validate()?;
    if prefix.is_empty() {
        return Ok(0.0);
    }
    let n = prefix.len();
    let cond = gp::factor_gram(n, &|i, j| gp::gram_entry(prefix, i, j, params), params)?;
    let mut sq = 0.0;
    for target in action.path() {
        let mut col: Vec<f64> = (0..n)
            .map(|i| gp::kernel_unchecked(target, &prefix[i], params))
            .collect();
        cond.solve_in_place(&mut col);
        sq += dot(&col, &col);
    }
    Ok(sq.sqrt())
}

/// Source of the standard-normal innovation vectors behind stochastic
/// sampling. The production source derives one ChaCha stream per
/// (node-path, action) so parallel and serial evaluation agree exactly;
/// the zero source collapses the stochastic recursion onto the most-likely
/// one and exists for tests.
pub trait InnovationSource: Sync {
    fn innovations(&self, draw_key: u64, n: usize, kappa: usize) -> Vec<Vec<f64>>;
}

pub struct SeededGaussian;

impl InnovationSource for SeededGaussian {
    fn innovations(&self, draw_key: u64, n: usize, kappa: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(draw_key);
        (0..n).map(|_| rng::standard_normals(&mut r, kappa)).collect()
    }
}

pub struct ZeroInnovations;

impl InnovationSource for ZeroInnovations {
    fn innovations(&self, _draw_key: u64, n: usize, kappa: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; kappa]; n]
    }
}

/// Key-derivation tags keeping sample streams and child identities disjoint.
/// Shared with the anytime tree so both planners draw identical sample sets
/// from the same master seed.
pub(crate) const TAG_DRAW: u64 = 1;
pub(crate) const TAG_CHILD: u64 = 2;
pub(crate) const TAG_ROOT: u64 = 0x726f6f74;

/// Most-likely Bellman recursion over a prefix table, optionally counting
/// every evaluated (stage, action, data) tuple.
pub struct MlEval<'a> {
    tables: &'a PrefixTables,
    beta: f64,
    counter: Option<&'a AtomicU64>,
}

impl<'a> MlEval<'a> {
    pub fn new(tables: &'a PrefixTables, beta: f64) -> Self {
        MlEval {
            tables,
            beta,
            counter: None,
        }
    }

    pub fn counting(tables: &'a PrefixTables, beta: f64, counter: &'a AtomicU64) -> Self {
        MlEval {
            tables,
            beta,
            counter: Some(counter),
        }
    }

    /// State value at a prefix node (None = planning root) given whitened
    /// measurements: substituting posterior means for random outputs whitens
    /// to zeros, so `u` stays as-is down the recursion.
    pub fn value(&self, at: Option<usize>, u: &[f64]) -> f64 {
        let children = self.tables.children_of(at);
        if children.is_empty() {
            return 0.0;
        }
        children
            .iter()
            .map(|&c| self.q(c, u))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Action value of an edge given the parent's whitened measurements.
    pub fn q(&self, edge: usize, u: &[f64]) -> f64 {
        if let Some(c) = self.counter {
            c.fetch_add(1, Ordering::Relaxed);
        }
        let r = self.tables.reward(edge, u, self.beta);
        if self.tables.node(edge).stage >= self.tables.horizon() {
            return r;
        }
        r + self.value(Some(edge), u)
    }
}

/// Per-action scores from one epsilon-policy evaluation.
#[derive(Debug, Clone)]
pub struct ActionScore {
    pub action_index: usize,
    pub q_sampled: f64,
    pub q_ml: f64,
    /// The arbitrated value actually ranked.
    pub q_eps: f64,
    /// Whether the stochastic estimate passed the closeness test.
    pub used_sampled: bool,
}

/// Outcome of one epsilon-policy decision.
#[derive(Debug, Clone)]
pub struct EpsilonDecision {
    pub action: MacroAction,
    pub action_index: usize,
    pub scores: Vec<ActionScore>,
    /// lambda * H + theta.
    pub threshold: f64,
    pub sampling: ResolvedSampling,
    pub nodes_explored: u64,
}

/// Exact planner over a prefix table: most-likely and stochastic Bellman
/// recursions plus the epsilon policy.
pub struct ExactPlanner<'a> {
    tables: &'a PrefixTables,
    beta: f64,
    sampling: ResolvedSampling,
    master_key: u64,
    counter: AtomicU64,
}

impl<'a> ExactPlanner<'a> {
    pub fn new(tables: &'a PrefixTables, config: &PlannerConfig, a_max: usize) -> Result<Self> {
        if config.horizon != tables.horizon() {
            return Err(Error::invalid(format!(
                "config horizon {} vs tables horizon {}",
                config.horizon,
                tables.horizon()
            )));
        }
        let sampling = resolve_sampling(config, tables, a_max)?;
        let tree = ((a_max.max(1) * sampling.n) as f64).powi(config.horizon as i32);
        if tree > config.eval_cap {
            return Err(Error::capability(format!(
                "(A*N)^H = ({} * {})^{} = {tree:.3e} exceeds the evaluation cap {:.3e}",
                a_max, sampling.n, config.horizon, config.eval_cap
            )));
        }
        Ok(ExactPlanner {
            tables,
            beta: config.beta,
            sampling,
            master_key: rng::mix(config.seed, TAG_ROOT),
            counter: AtomicU64::new(0),
        })
    }

    pub fn sampling(&self) -> ResolvedSampling {
        self.sampling
    }

    pub fn tables(&self) -> &PrefixTables {
        self.tables
    }

    /// Q evaluations so far: one count per (stage, action, data) tuple in
    /// either recursion.
    pub fn nodes_explored(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    fn count(&self) {
        self.counter.fetch_add(1, Ordering::Relaxed);
    }

    /// Most-likely value of the node `at` (None = the planning root) given
    /// the whitened measurements `u`.
    pub fn value_ml(&self, at: Option<usize>, u: &[f64]) -> f64 {
        MlEval::counting(self.tables, self.beta, &self.counter).value(at, u)
    }

    /// Most-likely action value of edge `edge` given the parent's whitened
    /// measurements.
    pub fn q_ml(&self, edge: usize, u: &[f64]) -> f64 {
        MlEval::counting(self.tables, self.beta, &self.counter).q(edge, u)
    }

    /// Stochastic value under N-sample approximation of each expectation.
    pub fn value_sampled(
        &self,
        at: Option<usize>,
        u: &[f64],
        node_key: u64,
        src: &dyn InnovationSource,
    ) -> f64 {
        let children = self.tables.children_of(at);
        children
            .iter()
            .map(|&c| self.q_sampled(c, u, node_key, src))
            .fold(f64::NEG_INFINITY, f64::max)
            .max_by_empty(children.is_empty())
    }

    /// Stochastic action value: R plus the sample average of child values,
    /// each child's whitened extension being exactly its innovation vector.
    pub fn q_sampled(
        &self,
        edge: usize,
        u: &[f64],
        node_key: u64,
        src: &dyn InnovationSource,
    ) -> f64 {
        self.count();
        let node = self.tables.node(edge);
        let r = self.tables.reward(edge, u, self.beta);
        if node.stage >= self.tables.horizon() {
            return r;
        }
        let n = self.sampling.n;
        let draw_key = rng::mix_many(node_key, &[TAG_DRAW]);
        let xs = src.innovations(draw_key, n, self.tables.kappa());
        let mut acc = 0.0;
        for (l, x) in xs.iter().enumerate() {
            let child_u = self.tables.extend_u(edge, u, x);
            let child_key =
                rng::mix_many(node_key, &[TAG_CHILD, node.action_index as u64, l as u64]);
            acc += self.value_sampled(Some(edge), &child_u, child_key, src);
        }
        r + acc / n as f64
    }

    /// The epsilon policy: rank each candidate by its stochastic estimate
    /// when it is boundedly close to the most-likely estimate, otherwise by
    /// the most-likely estimate; break ties lexicographically on the path.
    pub fn epsilon_policy(&self, data: &ObservationSet) -> Result<EpsilonDecision> {
        self.epsilon_policy_with(data, &SeededGaussian)
    }

    pub fn epsilon_policy_with(
        &self,
        data: &ObservationSet,
        src: &dyn InnovationSource,
    ) -> Result<EpsilonDecision> {
        if data.locations() != self.tables.d0_locations() {
            return Err(Error::invalid(
                "observation set does not match the conditioning set the tables were built on",
            ));
        }
        let roots = self.tables.root_children();
        if roots.is_empty() {
            return Err(Error::invalid(
                "no macro-action is available at the current anchor",
            ));
        }
        let u0 = self.tables.root_u(data.measurements())?;
        let threshold =
            self.sampling.lambda * self.tables.horizon() as f64 + self.sampling.theta;
        let mut scores = Vec::with_capacity(roots.len());
        for &c in roots {
            let q_s = self.q_sampled(c, &u0, self.master_key, src);
            let q_m = self.q_ml(c, &u0);
            let used_sampled = (q_s - q_m).abs() <= threshold;
            scores.push(ActionScore {
                action_index: self.tables.node(c).action_index,
                q_sampled: q_s,
                q_ml: q_m,
                q_eps: if used_sampled { q_s } else { q_m },
                used_sampled,
            });
        }
        let mut best = 0usize;
        for i in 1..roots.len() {
            let better = scores[i].q_eps > scores[best].q_eps
                || (scores[i].q_eps == scores[best].q_eps
                    && self
                        .tables
                        .node(roots[i])
                        .action
                        .total_cmp(&self.tables.node(roots[best]).action)
                        == std::cmp::Ordering::Less);
            if better {
                best = i;
            }
        }
        Ok(EpsilonDecision {
            action: self.tables.node(roots[best]).action.clone(),
            action_index: scores[best].action_index,
            scores,
            threshold,
            sampling: self.sampling,
            nodes_explored: self.nodes_explored(),
        })
    }
}

/// max of an empty action set is the terminal value zero.
trait MaxByEmpty {
    fn max_by_empty(self, empty: bool) -> f64;
}

impl MaxByEmpty for f64 {
    fn max_by_empty(self, empty: bool) -> f64 {
        if empty {
            0.0
        } else {
            self
        }
    }
}
