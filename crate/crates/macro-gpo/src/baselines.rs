//! Myopic and reduced comparators sharing the same belief engine: the
//! batch-UCB myopic policy (the H = 1 special case of the epsilon policy),
//! the deterministic most-likely-lookahead policy, and a greedy baseline that
//! commits to a macro-action one primitive step at a time with hallucinated
//! variance updates.

use crate::env::{MacroAction, MacroActionCatalog};
use crate::error::{Error, Result};
use crate::gp::{self, KernelParams, Location, ObservationSet};
use crate::planner::{ExactPlanner, MlEval, PlannerConfig, SampleBudget};
use crate::tables::PrefixTables;

/// A baseline's decision plus its search-effort accounting (Q or score
/// evaluations), for the episode logs.
#[derive(Debug, Clone)]
pub struct BaselineDecision {
    pub action: MacroAction,
    pub nodes: u64,
}

/// Myopic batch-UCB policy: argmax over macro-actions of the stage reward
/// R(a, d) with exploration weight beta. Definitionally the epsilon policy
/// at H = 1.
pub fn db_gp_ucb(
    data: &ObservationSet,
    anchor: &Location,
    catalog: &MacroActionCatalog,
    params: &KernelParams,
    beta: f64,
    prefix_cap: usize,
) -> Result<BaselineDecision> {
    let tables = PrefixTables::build(data.locations(), anchor, catalog, params, 1, prefix_cap)?;
    let mut cfg = PlannerConfig::new(1, beta, SampleBudget::Fixed(1), 0);
    cfg.prefix_cap = prefix_cap;
    let planner = ExactPlanner::new(&tables, &cfg, catalog.a_max())?;
    let decision = planner.epsilon_policy(data)?;
    Ok(BaselineDecision {
        action: decision.action,
        nodes: decision.nodes_explored,
    })
}

/// Nonmyopic lookahead with most-likely observations: argmax of the
/// deterministic Q recursion at the root. Identical output on every seed.
pub fn nonmyopic_ucb_ml(
    data: &ObservationSet,
    anchor: &Location,
    catalog: &MacroActionCatalog,
    params: &KernelParams,
    horizon: usize,
    beta: f64,
    prefix_cap: usize,
) -> Result<BaselineDecision> {
    let tables =
        PrefixTables::build(data.locations(), anchor, catalog, params, horizon, prefix_cap)?;
    let roots = tables.root_children();
    if roots.is_empty() {
        return Err(Error::invalid(
            "no macro-action is available at the current anchor",
        ));
    }
    let u0 = tables.root_u(data.measurements())?;
    let counter = std::sync::atomic::AtomicU64::new(0);
    let ml = MlEval::counting(&tables, beta, &counter);
    let mut best: Option<(f64, usize)> = None;
    for &edge in roots {
        let q = ml.q(edge, &u0);
        let better = match best {
            None => true,
            Some((bq, bid)) => {
                q > bq
                    || (q == bq
                        && tables.node(edge).action.total_cmp(&tables.node(bid).action)
                            == std::cmp::Ordering::Less)
            }
        };
        if better {
            best = Some((q, edge));
        }
    }
    let (_, edge) = best.expect("nonempty action set");
    Ok(BaselineDecision {
        action: tables.node(edge).action.clone(),
        nodes: counter.load(std::sync::atomic::Ordering::Relaxed),
    })
}

/// Per-location score used by the greedy stepwise baseline.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GreedyScore {
    /// mu + sqrt(beta) * sigma.
    #[default]
    Ucb,
    /// Expected improvement over the best measurement seen so far.
    ExpectedImprovement,
}

/// Greedy batch baseline: walks the macro-action tree one primitive step at
/// a time, each step maximizing the per-location score with the posterior
/// variance hallucinated-updated after each committed step (the mean of the
/// committed location stands in for its unseen measurement, which leaves the
/// mean field unchanged and shrinks variances). Because the first steps
/// commit early, it can forfeit macro-actions whose value only shows later.
pub fn greedy_hallucinated_ucb(
    data: &ObservationSet,
    anchor: &Location,
    catalog: &MacroActionCatalog,
    params: &KernelParams,
    beta: f64,
    score: GreedyScore,
) -> Result<BaselineDecision> {
    let available = catalog.actions_from(anchor);
    if available.is_empty() {
        return Err(Error::invalid(
            "no macro-action is available at the current anchor",
        ));
    }
    let kappa = catalog.kappa();
    let mut candidates: Vec<&MacroAction> = available.iter().collect();
    let mut hallucinated = data.clone();
    let mut scored: u64 = 0;
    let best_seen = data
        .measurements()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    for step in 0..kappa {
        // Distinct next locations among the still-consistent candidates,
        // in deterministic order.
        let mut options: Vec<&Location> = Vec::new();
        for c in &candidates {
            let loc = &c.path()[step];
            if !options.iter().any(|o| *o == loc) {
                options.push(loc);
            }
        }
        let mut best: Option<(f64, &Location)> = None;
        for loc in options {
            scored += 1;
            let belief = gp::posterior(
                std::slice::from_ref(loc),
                &hallucinated,
                params,
            )?;
            let mu = belief.mean()[0];
            let var = (belief.covariance().at(0, 0) - params.noise_variance).max(0.0);
            let sigma = var.sqrt();
            let s = match score {
                GreedyScore::Ucb => mu + beta.sqrt() * sigma,
                GreedyScore::ExpectedImprovement => expected_improvement(mu, sigma, best_seen),
            };
            let better = match best {
                None => true,
                Some((bs, bl)) => {
                    s > bs || (s == bs && loc.total_cmp(bl) == std::cmp::Ordering::Less)
                }
            };
            if better {
                best = Some((s, loc));
            }
        }
        let (_, chosen) = best.expect("candidate set is nonempty");
        let chosen = chosen.clone();
        // Hallucinate the measurement at the committed location: condition
        // on its current posterior mean (variance shrinks, mean unchanged).
        let mean_here = gp::posterior(std::slice::from_ref(&chosen), &hallucinated, params)?
            .mean()[0];
        hallucinated.push_block(std::slice::from_ref(&chosen), &[mean_here])?;
        candidates.retain(|c| c.path()[step] == chosen);
        if candidates.is_empty() {
            return Err(Error::numerical(
                "greedy step eliminated every candidate macro-action",
            ));
        }
    }
    Ok(BaselineDecision {
        action: candidates[0].clone(),
        nodes: scored,
    })
}

fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if sigma <= 0.0 {
        return (mu - best).max(0.0);
    }
    let d = mu - best;
    let z = d / sigma;
    d * normal_cdf(z) + sigma * normal_pdf(z)
}

fn normal_pdf(z: f64) -> f64 {
    (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |err| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}
