//! Incremental search-tree construction with upper/lower value bounds,
//! Lipschitz sibling refinement, and the anytime policy it induces.
//!
//! Each iteration descends the partially built tree through the action with
//! the best lower bound and the sample child with the widest bound gap,
//! expands the first unexplored node it reaches, refines sibling bounds
//! through the value-Lipschitz constants, and backs the tightened bounds up
//! to the root. Every bound update is an interval intersection, so bounds
//! tighten monotonically by construction and the root gap omega is a
//! nonincreasing progress measure.

use crate::env::MacroAction;
use crate::error::{Error, Result};
use crate::gp::{KernelParams, Location, ObservationSet};
use crate::planner::{
    lambda_for_sample_count, sample_size, InnovationSource, MlEval, PlannerConfig, SampleBudget,
    SeededGaussian, DEFAULT_DELTA_FOR_FIXED_N, TAG_CHILD, TAG_DRAW, TAG_ROOT,
};
use crate::rng;
use crate::tables::PrefixTables;
use std::time::Instant;

/// Default cap on stored child records before the search stops gracefully.
pub const DEFAULT_RECORD_CAP: u64 = 50_000_000;

/// Interval-tightening slack for the hard bound assertions: pure float noise.
const BOUND_SLACK: f64 = 1e-9;

/// How long to keep iterating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnytimeBudget {
    Iterations(u64),
    WallclockMs(u64),
}

/// Measurement-independent caches plus the most-likely value cache for one
/// planning state: everything the tree construction reads.
pub struct Preprocessed {
    tables: PrefixTables,
    beta: f64,
    /// Most-likely action value per reachable prefix (the data being the
    /// most-likely continuation of the root observations).
    ml_q: Vec<f64>,
    /// Most-likely state value per reachable prefix.
    ml_v: Vec<f64>,
    root_u: Vec<f64>,
}

impl Preprocessed {
    pub fn tables(&self) -> &PrefixTables {
        &self.tables
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn ml_q(&self, edge: usize) -> f64 {
        self.ml_q[edge]
    }

    pub fn ml_v(&self, edge: usize) -> f64 {
        self.ml_v[edge]
    }

    pub fn root_u(&self) -> &[f64] {
        &self.root_u
    }
}

/// Build the prefix tables for a planning state and cache every most-likely
/// Q value over the reachable prefixes. Posterior covariances are
/// measurement-independent, so after this no tree operation factorizes
/// anything.
pub fn preprocess(
    data: &ObservationSet,
    anchor: &Location,
    catalog: &crate::env::MacroActionCatalog,
    params: &KernelParams,
    horizon: usize,
    beta: f64,
    prefix_cap: usize,
) -> Result<Preprocessed> {
    let tables = PrefixTables::build(
        data.locations(),
        anchor,
        catalog,
        params,
        horizon,
        prefix_cap,
    )?;
    let root_u = tables.root_u(data.measurements())?;
    // Most-likely data whitens to zeros, so one padded vector serves every
    // prefix. Children are created after parents, so a reverse sweep is
    // bottom-up.
    let n = tables.prefix_count();
    let mut ml_q = vec![0.0; n];
    let mut ml_v = vec![0.0; n];
    for id in (0..n).rev() {
        let node = tables.node(id);
        let v = if node.stage >= horizon || node.children.is_empty() {
            0.0
        } else {
            node.children
                .iter()
                .map(|&c| ml_q[c])
                .fold(f64::NEG_INFINITY, f64::max)
        };
        ml_v[id] = v;
        ml_q[id] = tables.reward(id, &root_u, beta) + v;
    }
    Ok(Preprocessed {
        tables,
        beta,
        ml_q,
        ml_v,
        root_u,
    })
}

struct SampleRec {
    z: Vec<f64>,
    child: usize,
}

struct ActRec {
    edge: usize,
    reward: f64,
    samples: Vec<SampleRec>,
    q_lo: f64,
    q_hi: f64,
}

struct TreeNode {
    /// Prefix-table edge this node's data extends; None at the root.
    prefix: Option<usize>,
    stage: usize,
    key: u64,
    u: Vec<f64>,
    explored: bool,
    acts: Vec<ActRec>,
    v_lo: f64,
    v_hi: f64,
}

/// The anytime search tree. Bounds at every node only tighten; both
/// directions are tracked with hard assertions.
pub struct SearchTree<'a> {
    pre: &'a Preprocessed,
    src: &'a dyn InnovationSource,
    n: usize,
    lambda: f64,
    nodes: Vec<TreeNode>,
    explored_count: u64,
    records_created: u64,
    record_cap: u64,
    cap_hit: bool,
}

impl<'a> SearchTree<'a> {
    pub fn new(
        pre: &'a Preprocessed,
        n: usize,
        lambda: f64,
        seed: u64,
        src: &'a dyn InnovationSource,
        record_cap: u64,
    ) -> Self {
        let root = TreeNode {
            prefix: None,
            stage: 0,
            key: rng::mix(seed, TAG_ROOT),
            u: pre.root_u.clone(),
            explored: false,
            acts: Vec::new(),
            v_lo: f64::NEG_INFINITY,
            v_hi: f64::INFINITY,
        };
        SearchTree {
            pre,
            src,
            n,
            lambda,
            nodes: vec![root],
            explored_count: 0,
            records_created: 0,
            record_cap,
            cap_hit: false,
        }
    }

    pub fn root_bounds(&self) -> (f64, f64) {
        (self.nodes[0].v_lo, self.nodes[0].v_hi)
    }

    pub fn explored_count(&self) -> u64 {
        self.explored_count
    }

    pub fn records_created(&self) -> u64 {
        self.records_created
    }

    pub fn cap_hit(&self) -> bool {
        self.cap_hit
    }

    pub fn root_explored(&self) -> bool {
        self.nodes[0].explored
    }

    /// Root-level (edge id, lower action bound) pairs in action order.
    pub fn root_action_lower_bounds(&self) -> Vec<(usize, f64)> {
        self.nodes[0]
            .acts
            .iter()
            .map(|a| (a.edge, a.q_lo))
            .collect()
    }

    fn horizon(&self) -> usize {
        self.pre.tables.horizon()
    }

    /// One full iteration: returns the root bounds after tightening.
    pub fn construct_root(&mut self) -> (f64, f64) {
        let (hi, lo) = self.construct(0);
        debug_assert!(lo <= hi + BOUND_SLACK);
        (hi, lo)
    }

    fn construct(&mut self, id: usize) -> (f64, f64) {
        let t = self.nodes[id].stage;
        if t >= self.horizon() {
            return (0.0, 0.0);
        }
        if !self.nodes[id].explored {
            return self.expand(id);
        }
        if self.nodes[id].acts.is_empty() {
            // Dead end: no actions available at this anchor.
            return (self.nodes[id].v_hi, self.nodes[id].v_lo);
        }
        // Descend the action with the best lower bound; ties fall to the
        // first (children are in lexicographic action order).
        let mut a_star = 0;
        for (i, a) in self.nodes[id].acts.iter().enumerate() {
            if a.q_lo > self.nodes[id].acts[a_star].q_lo {
                a_star = i;
            }
        }
        // Then the sample child with the widest gap.
        let mut l_star = 0;
        let mut best_gap = f64::NEG_INFINITY;
        for (l, s) in self.nodes[id].acts[a_star].samples.iter().enumerate() {
            let c = &self.nodes[s.child];
            let gap = c.v_hi - c.v_lo;
            if gap > best_gap {
                best_gap = gap;
                l_star = l;
            }
        }
        let child = self.nodes[id].acts[a_star].samples[l_star].child;
        let (c_hi, c_lo) = self.construct(child);
        self.tighten_node(child, c_lo, c_hi);
        self.refine_bounds(id, a_star, l_star);
        self.backup_action(id, a_star);
        self.backup_node(id);
        (self.nodes[id].v_hi, self.nodes[id].v_lo)
    }

    fn expand(&mut self, id: usize) -> (f64, f64) {
        let t = self.nodes[id].stage;
        if t >= self.horizon() {
            return (0.0, 0.0);
        }
        self.nodes[id].explored = true;
        self.explored_count += 1;
        let edges: Vec<usize> = self.pre.tables.children_of(self.nodes[id].prefix).to_vec();
        let parent_key = self.nodes[id].key;
        let parent_u = self.nodes[id].u.clone();
        let kappa = self.pre.tables.kappa();
        let theta_child = self.pre.tables.theta_stage((t + 1).min(self.horizon()));
        let ml = MlEval::new(&self.pre.tables, self.pre.beta);

        for edge in edges {
            let action_index = self.pre.tables.node(edge).action_index;
            let draw_key = rng::mix_many(parent_key, &[TAG_DRAW]);
            let xs = self.src.innovations(draw_key, self.n, kappa);
            let reward = self.pre.tables.reward(edge, &parent_u, self.pre.beta);

            let mut samples = Vec::with_capacity(self.n);
            let mut most_likely = 0usize;
            let mut best_norm = f64::INFINITY;
            for (l, x) in xs.iter().enumerate() {
                let z = self.pre.tables.z_from_innovation(edge, &parent_u, x);
                let child_u = self.pre.tables.extend_u(edge, &parent_u, x);
                let child_key =
                    rng::mix_many(parent_key, &[TAG_CHILD, action_index as u64, l as u64]);
                let (lo, hi) = if t + 1 >= self.horizon() {
                    (0.0, 0.0)
                } else {
                    // Initialize to the most-likely value of the child data
                    // plus/minus the deterministic gap bound; the interval
                    // contains its most-likely anchor by construction.
                    let v = ml.value(Some(edge), &child_u);
                    (v - theta_child, v + theta_child)
                };
                debug_assert!(lo <= hi + BOUND_SLACK);
                let norm = self.pre.tables.innovation_norm(edge, x);
                if norm < best_norm {
                    best_norm = norm;
                    most_likely = l;
                }
                let child = self.nodes.len();
                self.nodes.push(TreeNode {
                    prefix: Some(edge),
                    stage: t + 1,
                    key: child_key,
                    u: child_u,
                    explored: false,
                    acts: Vec::new(),
                    v_lo: lo,
                    v_hi: hi,
                });
                self.records_created += 1;
                samples.push(SampleRec { z, child });
            }
            if self.records_created >= self.record_cap {
                self.cap_hit = true;
            }
            let act_pos = self.nodes[id].acts.len();
            self.nodes[id].acts.push(ActRec {
                edge,
                reward,
                samples,
                q_lo: f64::NEG_INFINITY,
                q_hi: f64::INFINITY,
            });
            // Recursively expand only the most-likely sample, then let its
            // tightened bounds flow to the siblings.
            if t + 1 < self.horizon() {
                let child = self.nodes[id].acts[act_pos].samples[most_likely].child;
                let (c_hi, c_lo) = self.expand(child);
                self.tighten_node(child, c_lo, c_hi);
            }
            self.refine_bounds(id, act_pos, most_likely);
            self.backup_action(id, act_pos);
        }
        self.backup_node(id);
        (self.nodes[id].v_hi, self.nodes[id].v_lo)
    }

    /// Transfer the anchor sample's interval to its siblings through the
    /// value-Lipschitz constant: intervals never widen, the anchor is
    /// untouched.
    fn refine_bounds(&mut self, id: usize, act_pos: usize, anchor: usize) {
        let edge = self.nodes[id].acts[act_pos].edge;
        let l_child = self.pre.tables.node(edge).lipschitz;
        let (a_lo, a_hi, a_z) = {
            let s = &self.nodes[id].acts[act_pos].samples[anchor];
            let c = &self.nodes[s.child];
            (c.v_lo, c.v_hi, s.z.clone())
        };
        for l in 0..self.nodes[id].acts[act_pos].samples.len() {
            if l == anchor {
                continue;
            }
            let (child, dist) = {
                let s = &self.nodes[id].acts[act_pos].samples[l];
                let d: f64 = s
                    .z
                    .iter()
                    .zip(&a_z)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (s.child, d)
            };
            let b = l_child * dist;
            self.tighten_node(child, a_lo - b, a_hi + b);
        }
    }

    /// Interval intersection: bounds never widen. A probabilistic backup can
    /// conflict with the deterministic initialization band when the drawn
    /// samples are extreme (a delta-probability event); the conflicting side
    /// is clamped at the existing interval rather than crossing it, so the
    /// ordering invariant holds unconditionally.
    fn tighten_node(&mut self, id: usize, lo: f64, hi: f64) {
        let node = &mut self.nodes[id];
        node.v_lo = node.v_lo.max(lo.min(node.v_hi));
        node.v_hi = node.v_hi.min(hi.max(node.v_lo));
        assert!(
            node.v_lo <= node.v_hi + BOUND_SLACK,
            "bound crossing at stage {}: [{}, {}]",
            node.stage,
            node.v_lo,
            node.v_hi
        );
    }

    fn backup_action(&mut self, id: usize, act_pos: usize) {
        let (mut lo_sum, mut hi_sum) = (0.0, 0.0);
        let count = self.nodes[id].acts[act_pos].samples.len() as f64;
        for l in 0..self.nodes[id].acts[act_pos].samples.len() {
            let c = self.nodes[id].acts[act_pos].samples[l].child;
            lo_sum += self.nodes[c].v_lo;
            hi_sum += self.nodes[c].v_hi;
        }
        let r = self.nodes[id].acts[act_pos].reward;
        let q_lo = r + lo_sum / count - self.lambda;
        let q_hi = r + hi_sum / count + self.lambda;
        let a = &mut self.nodes[id].acts[act_pos];
        // Child bounds only tighten, so these move monotonically; the
        // intersection makes that a hard guarantee.
        a.q_lo = a.q_lo.max(q_lo);
        a.q_hi = a.q_hi.min(q_hi);
        assert!(a.q_lo <= a.q_hi + BOUND_SLACK, "action bound crossing");
    }

    fn backup_node(&mut self, id: usize) {
        if self.nodes[id].acts.is_empty() {
            self.tighten_node(id, 0.0, 0.0);
            return;
        }
        let v_lo = self.nodes[id]
            .acts
            .iter()
            .map(|a| a.q_lo)
            .fold(f64::NEG_INFINITY, f64::max);
        let v_hi = self.nodes[id]
            .acts
            .iter()
            .map(|a| a.q_hi)
            .fold(f64::NEG_INFINITY, f64::max);
        self.tighten_node(id, v_lo, v_hi);
    }

    #[cfg(test)]
    fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }
}

/// Per-action diagnostics of one anytime decision.
#[derive(Debug, Clone)]
pub struct AnytimeScore {
    pub action_index: usize,
    pub q_lower: f64,
    pub q_ml: f64,
    /// The value actually ranked.
    pub q_used: f64,
    pub used_lower: bool,
}

/// Outcome of one anytime planning call.
#[derive(Debug, Clone)]
pub struct AnytimeOutcome {
    pub action: MacroAction,
    pub action_index: usize,
    /// Final root gap.
    pub omega: f64,
    pub iterations: u64,
    pub nodes_explored: u64,
    pub records_created: u64,
    /// Root gap after each iteration; nonincreasing.
    pub omega_trace: Vec<f64>,
    /// Cumulative records after each iteration (node-growth accounting).
    pub records_trace: Vec<u64>,
    /// True when no iteration ran and the policy fell back to the
    /// most-likely values with untightened intervals.
    pub fallback_ml: bool,
    pub scores: Vec<AnytimeScore>,
    pub lambda: f64,
    pub delta: f64,
    pub theta: f64,
    pub n: usize,
}

/// Resolve lambda/delta/N for the anytime policy. Given a loss bound, the
/// anytime derivation uses lambda = 1 / (4H/eps + 1/(2 theta)); a pinned N
/// inverts the sample-size formula exactly as the exact planner does.
pub fn resolve_anytime_sampling(
    config: &PlannerConfig,
    tables: &PrefixTables,
    a_max: usize,
) -> Result<(usize, f64, f64)> {
    config.validate()?;
    let theta = tables.theta_max();
    let k = tables.k_max();
    let h = config.horizon as f64;
    match &config.budget {
        SampleBudget::Fixed(n) => {
            let delta = DEFAULT_DELTA_FOR_FIXED_N;
            let lambda = lambda_for_sample_count(*n, delta, k, config.horizon, a_max)?;
            Ok((*n, lambda, delta))
        }
        SampleBudget::LossBound { epsilon } => {
            if theta == 0.0 {
                // Degenerate lookahead: values are exact, one sample suffices.
                return Ok((1, 0.0, 0.5));
            }
            let lambda = 1.0 / (4.0 * h / epsilon + 1.0 / (2.0 * theta));
            let delta = (epsilon / (8.0 * theta * h)).min(0.5);
            let n = sample_size(lambda, delta, k, config.horizon, a_max)?;
            Ok((n, lambda, delta))
        }
        SampleBudget::StageBound { lambda, delta } => Ok((
            sample_size(*lambda, *delta, k, config.horizon, a_max)?,
            *lambda,
            *delta,
        )),
    }
}

/// Run the anytime search from a preprocessed state and return the induced
/// decision. Deterministic per seed and budget; the wallclock budget is
/// checked between iterations only, so an iteration is never cut midway.
pub fn anytime_policy(
    pre: &Preprocessed,
    config: &PlannerConfig,
    budget: AnytimeBudget,
    record_cap: u64,
) -> Result<AnytimeOutcome> {
    anytime_policy_with(pre, config, budget, record_cap, &SeededGaussian)
}

pub fn anytime_policy_with(
    pre: &Preprocessed,
    config: &PlannerConfig,
    budget: AnytimeBudget,
    record_cap: u64,
    src: &dyn InnovationSource,
) -> Result<AnytimeOutcome> {
    let tables = pre.tables();
    if config.horizon != tables.horizon() {
        return Err(Error::invalid(format!(
            "config horizon {} vs preprocessed horizon {}",
            config.horizon,
            tables.horizon()
        )));
    }
    let roots = tables.root_children();
    if roots.is_empty() {
        return Err(Error::invalid(
            "no macro-action is available at the current anchor",
        ));
    }
    let a_max = roots.len();
    let (n, lambda, delta) = resolve_anytime_sampling(config, tables, a_max)?;
    let theta = tables.theta_max();

    let mut tree = SearchTree::new(pre, n, lambda, config.seed, src, record_cap);
    let start = Instant::now();
    let mut iterations = 0u64;
    let mut omega_trace = Vec::new();
    let mut records_trace = Vec::new();
    loop {
        let permitted = match budget {
            AnytimeBudget::Iterations(k) => iterations < k,
            AnytimeBudget::WallclockMs(ms) => {
                iterations == 0 || start.elapsed().as_millis() < ms as u128
            }
        };
        if !permitted || tree.cap_hit() {
            break;
        }
        let (hi, lo) = tree.construct_root();
        iterations += 1;
        let omega = hi - lo;
        if let Some(prev) = omega_trace.last() {
            assert!(
                omega <= prev + BOUND_SLACK,
                "omega increased: {omega} after {prev}"
            );
        }
        omega_trace.push(omega);
        records_trace.push(tree.records_created());
    }

    let fallback_ml = !tree.root_explored();
    let (omega, scores): (f64, Vec<AnytimeScore>) = if fallback_ml {
        // Nothing tightened: rank by the most-likely values alone.
        let scores = roots
            .iter()
            .map(|&e| AnytimeScore {
                action_index: tables.node(e).action_index,
                q_lower: f64::NEG_INFINITY,
                q_ml: pre.ml_q(e),
                q_used: pre.ml_q(e),
                used_lower: false,
            })
            .collect();
        (f64::INFINITY, scores)
    } else {
        let (lo, hi) = tree.root_bounds();
        let omega = hi - lo;
        let gate = 2.0 * lambda + omega + theta;
        let scores = tree
            .root_action_lower_bounds()
            .into_iter()
            .map(|(edge, q_lo)| {
                let q_ml = pre.ml_q(edge);
                let used_lower = (q_lo - q_ml).abs() <= gate;
                AnytimeScore {
                    action_index: tables.node(edge).action_index,
                    q_lower: q_lo,
                    q_ml,
                    q_used: if used_lower { q_lo } else { q_ml },
                    used_lower,
                }
            })
            .collect();
        (omega, scores)
    };

    let mut best = 0usize;
    for i in 1..roots.len() {
        let better = scores[i].q_used > scores[best].q_used
            || (scores[i].q_used == scores[best].q_used
                && tables
                    .node(roots[i])
                    .action
                    .total_cmp(&tables.node(roots[best]).action)
                    == std::cmp::Ordering::Less);
        if better {
            best = i;
        }
    }

    Ok(AnytimeOutcome {
        action: tables.node(roots[best]).action.clone(),
        action_index: scores[best].action_index,
        omega,
        iterations,
        nodes_explored: tree.explored_count(),
        records_created: tree.records_created(),
        omega_trace,
        records_trace,
        fallback_ml,
        scores,
        lambda,
        delta,
        theta,
        n,
    })
}
