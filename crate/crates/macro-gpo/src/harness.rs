//! Episode runner, metrics, and suite replication. An episode alternates
//! plan -> execute -> append observations for budget/kappa stages, replanning
//! each stage with the full history. A suite replays that over seeds and
//! planner kinds (same seed, same field across planners, so comparisons are
//! paired) and emits deterministic CSV.

use crate::anytime::{anytime_policy, preprocess, AnytimeBudget, DEFAULT_RECORD_CAP};
use crate::baselines::{db_gp_ucb, greedy_hallucinated_ucb, nonmyopic_ucb_ml};
use crate::config::{ActionKind, ExperimentConfig, PlannerKind, StartSpec};
use crate::env::{
    execute, load_field, load_graph, sample_phenomenon, Extent,
    GridDomain, MacroAction, MacroActionCatalog, PhenomenonRealization,
};
use crate::error::{Error, Result};
use crate::gp::{KernelParams, Location, ObservationSet};
use crate::planner::{ExactPlanner, PlannerConfig};
use crate::rng;
use crate::tables::{PrefixTables, DEFAULT_PREFIX_CAP};
use rand::Rng;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// Seed-derivation tags for the independent streams of one suite.
const TAG_FIELD: u64 = 11;
const TAG_EXEC: u64 = 12;
const TAG_START: u64 = 13;
const TAG_PLAN: u64 = 14;

/// One per-stage row of an episode.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: usize,
    pub action: MacroAction,
    /// Index of the chosen action within the anchor's available list.
    pub action_index: usize,
    pub observed: Vec<f64>,
    /// Cumulative mean of (z - prior_mean) over all executed observations.
    pub avg_norm_output: f64,
    /// Global latent max minus the best latent value visited so far.
    pub simple_regret: f64,
    /// Planner search effort for this stage.
    pub nodes: u64,
    pub millis: u64,
}

/// A full episode: metadata plus per-stage records.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub planner: PlannerKind,
    pub seed: u64,
    pub config_hash: u64,
    pub stages: Vec<StageRecord>,
}

/// A task environment ready to run episodes against.
pub struct Environment {
    pub realization: PhenomenonRealization,
    pub catalog: MacroActionCatalog,
    pub params: KernelParams,
    /// Anchors an episode may start from.
    pub start_candidates: Vec<Location>,
}

/// The grid a config describes, when it describes one.
pub fn build_grid(config: &ExperimentConfig) -> Result<GridDomain> {
    let grid = config
        .domain
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("this config has no domain min/max/cells".into()))?;
    let extents: Vec<Extent> = grid
        .min
        .iter()
        .zip(&grid.max)
        .zip(&grid.cells)
        .map(|((min, max), cells)| Extent {
            min: *min,
            max: *max,
            cells: *cells,
        })
        .collect();
    GridDomain::new(extents, None)
}

/// The macro-action catalog a config describes (no ground-truth field
/// needed: planning alone does not execute).
pub fn build_catalog(config: &ExperimentConfig) -> Result<MacroActionCatalog> {
    match config.actions.kind {
        ActionKind::CardinalDives => {
            MacroActionCatalog::cardinal(&build_grid(config)?, config.actions.kappa)
        }
        ActionKind::GraphPaths => {
            let graph_path = config.domain.graph_file.as_ref().ok_or_else(|| {
                Error::Config("graph-paths needs domain.graph_file".into())
            })?;
            MacroActionCatalog::graph(
                &load_graph(graph_path)?,
                config.actions.kappa,
                config.actions.downsample,
            )
        }
        ActionKind::ExplicitFile => {
            let actions_path = config.actions.actions_file.as_ref().ok_or_else(|| {
                Error::Config("explicit-file needs actions.actions_file".into())
            })?;
            let entries = load_explicit_actions(actions_path, config.actions.kappa)?;
            MacroActionCatalog::explicit(entries, config.actions.kappa)
        }
    }
}

/// Assemble the environment a config describes. Grid domains sample their
/// field per replication unless a field file pins it; graph environments are
/// always file-backed.
pub fn build_environment(config: &ExperimentConfig, field_seed: u64) -> Result<Environment> {
    let params = config.kernel.clone();
    match config.actions.kind {
        ActionKind::CardinalDives => {
            let domain = build_grid(config)?;
            let realization = match &config.domain.field_file {
                Some(path) => load_field(path)?,
                None => sample_phenomenon(&domain, &params, field_seed)?,
            };
            let catalog = MacroActionCatalog::cardinal(&domain, config.actions.kappa)?;
            let start_candidates = domain
                .accessible_cells()
                .iter()
                .map(|i| domain.location(i))
                .collect();
            Ok(Environment {
                realization,
                catalog,
                params,
                start_candidates,
            })
        }
        ActionKind::GraphPaths => {
            let graph_path = config.domain.graph_file.as_ref().ok_or_else(|| {
                Error::Config("graph-paths needs domain.graph_file".into())
            })?;
            let field_path = config.domain.field_file.as_ref().ok_or_else(|| {
                Error::Config("graph-paths needs domain.field_file (ground truth)".into())
            })?;
            let graph = load_graph(graph_path)?;
            let realization = load_field(field_path)?;
            let catalog = MacroActionCatalog::graph(
                &graph,
                config.actions.kappa,
                config.actions.downsample,
            )?;
            let start_candidates = graph.nodes().to_vec();
            Ok(Environment {
                realization,
                catalog,
                params,
                start_candidates,
            })
        }
        ActionKind::ExplicitFile => {
            let actions_path = config.actions.actions_file.as_ref().ok_or_else(|| {
                Error::Config("explicit-file needs actions.actions_file".into())
            })?;
            let field_path = config.domain.field_file.as_ref().ok_or_else(|| {
                Error::Config("explicit-file needs domain.field_file (ground truth)".into())
            })?;
            let realization = load_field(field_path)?;
            let entries = load_explicit_actions(actions_path, config.actions.kappa)?;
            let start_candidates = entries.iter().map(|(a, _)| a.clone()).collect();
            let catalog = MacroActionCatalog::explicit(entries, config.actions.kappa)?;
            Ok(Environment {
                realization,
                catalog,
                params,
                start_candidates,
            })
        }
    }
}

/// Explicit-actions file: header line, then rows of
/// anchor_x,anchor_y,x1,y1,...,x_kappa,y_kappa.
fn load_explicit_actions(
    path: &Path,
    kappa: usize,
) -> Result<Vec<(Location, Vec<MacroAction>)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut by_anchor: Vec<(Location, Vec<MacroAction>)> = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || i == 0 {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("expected a number, got {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 2 + 2 * kappa {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "expected {} values (anchor + {kappa} path points), got {}",
                    2 + 2 * kappa,
                    vals.len()
                ),
            });
        }
        let anchor = Location::new(vals[0..2].to_vec());
        let path_locs: Vec<Location> = vals[2..]
            .chunks(2)
            .map(|c| Location::new(c.to_vec()))
            .collect();
        let action = MacroAction::new(path_locs)?;
        match by_anchor.iter_mut().find(|(a, _)| *a == anchor) {
            Some((_, list)) => list.push(action),
            None => by_anchor.push((anchor, vec![action])),
        }
    }
    Ok(by_anchor)
}

/// Observation file for the `plan` command: header `x,y,z`; the last row's
/// location is the agent's anchor.
pub fn load_observations(path: &Path) -> Result<ObservationSet> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut locations = Vec::new();
    let mut measurements = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 {
            if trimmed != "x,y,z" {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected header `x,y,z`, got {trimmed:?}"),
                });
            }
            continue;
        }
        let cols: Vec<&str> = trimmed.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 columns, got {}", cols.len()),
            });
        }
        let mut vals = [0.0f64; 3];
        for (v, c) in vals.iter_mut().zip(&cols) {
            *v = c.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("expected a number, got {c:?}"),
            })?;
        }
        locations.push(Location::new(vals[0..2].to_vec()));
        measurements.push(vals[2]);
    }
    ObservationSet::new(locations, measurements)
}

/// Cumulative average of normalized output measurements after each stage:
/// the prior mean is subtracted from every executed measurement.
pub fn metric_avg_normalized_output(observed: &[Vec<f64>], prior_mean: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(observed.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for block in observed {
        for z in block {
            sum += z - prior_mean;
            count += 1;
        }
        out.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    out
}

/// Simple regret after each stage: the global latent maximum minus the best
/// latent value at any visited cell so far (prior locations included when
/// they sit on the field). Latent values, not noisy measurements, so the
/// curve is nonincreasing.
pub fn metric_simple_regret(
    realization: &PhenomenonRealization,
    prior_locations: &[Location],
    actions: &[MacroAction],
) -> Vec<f64> {
    let (gmax, _) = realization.global_max();
    let mut best = f64::NEG_INFINITY;
    for loc in prior_locations {
        if let Some(y) = realization.value_at(loc) {
            best = best.max(y);
        }
    }
    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        for loc in a.path() {
            if let Some(y) = realization.value_at(loc) {
                best = best.max(y);
            }
        }
        out.push(gmax - best.max(f64::MIN));
    }
    out
}

/// Run-time knobs shared by `run` and `bench`.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub prefix_cap: usize,
    pub record_cap: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            prefix_cap: DEFAULT_PREFIX_CAP,
            record_cap: DEFAULT_RECORD_CAP,
        }
    }
}

/// Run one episode of `budget` observations from `start`, replanning every
/// stage with the full history. The planning horizon is truncated to the
/// remaining stages near the end of the budget.
pub fn run_episode(
    env: &Environment,
    kind: PlannerKind,
    config: &ExperimentConfig,
    seed: u64,
    start: &Location,
    settings: &RunSettings,
) -> Result<EpisodeRecord> {
    let kappa = config.actions.kappa;
    let budget = config.suite.budget;
    if budget % kappa != 0 {
        return Err(Error::invalid(format!(
            "budget {budget} is not divisible by kappa {kappa}"
        )));
    }
    let stages = budget / kappa;
    let params = &env.params;

    // Stage-0 prior data: the config's explicit list, defaulting to one
    // noise-free observation at the start location; latent-valued extras
    // (e.g. a buoy) are read off the realized field and come first so the
    // start stays the anchor.
    let mut prior_locs: Vec<Location> = Vec::new();
    let mut prior_zs: Vec<f64> = Vec::new();
    if let Some(rows) = &config.suite.prior_latent_obs {
        for coords in rows {
            let loc = Location::new(coords.clone());
            let y = env.realization.value_at(&loc).ok_or_else(|| {
                Error::invalid(format!("prior_latent_obs location {loc} is not on the field"))
            })?;
            prior_locs.push(loc);
            prior_zs.push(y);
        }
    }
    match &config.suite.prior_obs {
        Some(rows) => {
            for (c, z) in rows {
                prior_locs.push(Location::new(c.clone()));
                prior_zs.push(*z);
            }
        }
        None => {
            let y = env.realization.value_at(start).ok_or_else(|| {
                Error::invalid(format!("start location {start} is not on the field"))
            })?;
            prior_locs.push(start.clone());
            prior_zs.push(y);
        }
    }
    let mut data = ObservationSet::new(prior_locs, prior_zs)?;
    let prior_locations = data.locations().to_vec();
    let mut anchor = match data.anchor() {
        Some(a) => a.clone(),
        None => start.clone(),
    };
    if config.suite.prior_obs.is_none() {
        anchor = start.clone();
    }

    let mut exec_rng = rng::stream(rng::mix_many(seed, &[TAG_EXEC]));
    let mut observed_blocks: Vec<Vec<f64>> = Vec::new();
    let mut actions_taken: Vec<MacroAction> = Vec::new();
    let mut records = Vec::with_capacity(stages);

    for stage in 0..stages {
        // The planner keeps its full lookahead even when fewer stages
        // remain in the budget (replanning is receding-horizon throughout);
        // the episode simply stops executing when the budget runs out.
        let horizon = config.planner.horizon.max(1);
        let plan_seed = rng::mix_many(seed, &[TAG_PLAN, stage as u64]);
        let started = Instant::now();
        let (action, action_index, nodes) = plan_one(
            env,
            kind,
            config,
            &data,
            &anchor,
            horizon,
            plan_seed,
            settings,
        )?;
        let millis = started.elapsed().as_millis() as u64;

        let z = execute(
            &env.realization,
            &action,
            params.noise_variance,
            &mut exec_rng,
        )
        .map_err(|e| {
            Error::invalid(format!(
                "stage {stage}: executing {action} failed: {e}"
            ))
        })?;
        data.push_block(action.path(), &z)?;
        observed_blocks.push(z.clone());
        actions_taken.push(action.clone());
        anchor = action.terminus().clone();

        let avg = *metric_avg_normalized_output(&observed_blocks, params.prior_mean)
            .last()
            .expect("at least one block");
        let regret = *metric_simple_regret(&env.realization, &prior_locations, &actions_taken)
            .last()
            .expect("at least one action");
        records.push(StageRecord {
            stage,
            action,
            action_index,
            observed: z,
            avg_norm_output: avg,
            simple_regret: regret,
            nodes,
            millis,
        });
    }

    Ok(EpisodeRecord {
        planner: kind,
        seed,
        config_hash: config.config_hash,
        stages: records,
    })
}

#[allow(clippy::too_many_arguments)]
fn plan_one(
    env: &Environment,
    kind: PlannerKind,
    config: &ExperimentConfig,
    data: &ObservationSet,
    anchor: &Location,
    horizon: usize,
    plan_seed: u64,
    settings: &RunSettings,
) -> Result<(MacroAction, usize, u64)> {
    let params = &env.params;
    let catalog = &env.catalog;
    let beta = config.planner.beta;
    match kind {
        PlannerKind::EpsilonMacroGpo => {
            let tables = PrefixTables::build(
                data.locations(),
                anchor,
                catalog,
                params,
                horizon,
                settings.prefix_cap,
            )?;
            let mut cfg = PlannerConfig::new(
                horizon,
                beta,
                config.planner.budget.clone(),
                plan_seed,
            );
            cfg.prefix_cap = settings.prefix_cap;
            let planner = ExactPlanner::new(&tables, &cfg, catalog.a_max())?;
            let d = planner.epsilon_policy(data)?;
            Ok((d.action, d.action_index, d.nodes_explored))
        }
        PlannerKind::Anytime => {
            let pre = preprocess(
                data,
                anchor,
                catalog,
                params,
                horizon,
                beta,
                settings.prefix_cap,
            )?;
            let mut cfg = PlannerConfig::new(
                horizon,
                beta,
                config.planner.budget.clone(),
                plan_seed,
            );
            cfg.prefix_cap = settings.prefix_cap;
            let budget = match (config.planner.iterations, config.planner.wallclock_ms) {
                (_, Some(ms)) => AnytimeBudget::WallclockMs(ms),
                (Some(it), None) => AnytimeBudget::Iterations(it),
                (None, None) => AnytimeBudget::Iterations(1500),
            };
            let out = anytime_policy(&pre, &cfg, budget, settings.record_cap)?;
            Ok((out.action, out.action_index, out.nodes_explored))
        }
        PlannerKind::DbGpUcb => {
            let d = db_gp_ucb(data, anchor, catalog, params, beta, settings.prefix_cap)?;
            let idx = action_index_of(catalog, anchor, &d.action)?;
            Ok((d.action, idx, d.nodes))
        }
        PlannerKind::NonmyopicUcbMl => {
            let d = nonmyopic_ucb_ml(
                data,
                anchor,
                catalog,
                params,
                horizon,
                beta,
                settings.prefix_cap,
            )?;
            let idx = action_index_of(catalog, anchor, &d.action)?;
            Ok((d.action, idx, d.nodes))
        }
        PlannerKind::GreedyUcb => {
            let d = greedy_hallucinated_ucb(
                data,
                anchor,
                catalog,
                params,
                beta,
                config.planner.greedy_score,
            )?;
            let idx = action_index_of(catalog, anchor, &d.action)?;
            Ok((d.action, idx, d.nodes))
        }
    }
}

fn action_index_of(
    catalog: &MacroActionCatalog,
    anchor: &Location,
    action: &MacroAction,
) -> Result<usize> {
    catalog
        .actions_from(anchor)
        .iter()
        .position(|a| a == action)
        .ok_or_else(|| Error::invalid("chosen action is not in the catalog"))
}

/// Everything a suite run produces.
pub struct SuiteOutput {
    pub episodes: Vec<EpisodeRecord>,
    /// planner,seed,stage,action_index,avg_norm_output,simple_regret,nodes,millis
    pub metrics_csv: String,
    /// planner,stage,mean_out,se_out,mean_regret,se_regret
    pub summary_csv: String,
    /// planner,observations,mean,se — average normalized output curve.
    pub curve_output_csv: String,
    /// planner,observations,mean,se — simple regret curve.
    pub curve_regret_csv: String,
}

/// Run `replications x planners` episodes concurrently (same replication =
/// same field and same seeds across planners, so comparisons are paired) and
/// assemble order-deterministic CSV.
pub fn run_suite(config: &ExperimentConfig, settings: &RunSettings) -> Result<SuiteOutput> {
    let planners = config.suite.planners.clone();
    let reps = config.suite.replications;
    let tasks: Vec<(usize, usize)> = (0..planners.len())
        .flat_map(|p| (0..reps).map(move |r| (p, r)))
        .collect();

    let results: Mutex<Vec<Option<Result<EpisodeRecord>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = config.suite.workers.min(tasks.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let (p, r) = tasks[i];
                let out = run_replication(config, planners[p], r as u64, settings);
                results.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });

    let episodes: Vec<EpisodeRecord> = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect::<Result<Vec<_>>>()?;

    let metrics_csv = render_metrics_csv(&episodes);
    let summary = summarize(&episodes, config.actions.kappa);
    Ok(SuiteOutput {
        episodes,
        metrics_csv,
        summary_csv: summary.summary_csv,
        curve_output_csv: summary.curve_output_csv,
        curve_regret_csv: summary.curve_regret_csv,
    })
}

fn run_replication(
    config: &ExperimentConfig,
    kind: PlannerKind,
    rep: u64,
    settings: &RunSettings,
) -> Result<EpisodeRecord> {
    let suite_seed = config.suite.seed;
    let field_seed = rng::mix_many(suite_seed, &[TAG_FIELD, rep]);
    let env = build_environment(config, field_seed)?;
    let start = match &config.suite.start {
        StartSpec::Cell(idx) => match config.actions.kind {
            ActionKind::CardinalDives => build_grid(config)?.location(idx),
            _ => {
                return Err(Error::Config(
                    "suite.start cells only apply to grid domains; use start = random".into(),
                ))
            }
        },
        StartSpec::Random => {
            let mut r = rng::stream(rng::mix_many(suite_seed, &[TAG_START, rep]));
            let candidates = &env.start_candidates;
            candidates[r.gen_range(0..candidates.len())].clone()
        }
    };
    let episode_seed = rng::mix_many(suite_seed, &[rep]);
    run_episode(&env, kind, config, episode_seed, &start, settings)
}

fn fmt_val(v: f64) -> String {
    format!("{v:.9e}")
}

fn render_metrics_csv(episodes: &[EpisodeRecord]) -> String {
    let mut out =
        String::from("planner,seed,stage,action_index,avg_norm_output,simple_regret,nodes,millis\n");
    for e in episodes {
        for s in &e.stages {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.planner,
                e.seed,
                s.stage,
                s.action_index,
                fmt_val(s.avg_norm_output),
                fmt_val(s.simple_regret),
                s.nodes,
                s.millis
            ));
        }
    }
    out
}

struct Summary {
    summary_csv: String,
    curve_output_csv: String,
    curve_regret_csv: String,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn summarize(episodes: &[EpisodeRecord], kappa: usize) -> Summary {
    // Group by (planner, stage), keeping first-appearance planner order.
    let mut planners: Vec<PlannerKind> = Vec::new();
    for e in episodes {
        if !planners.contains(&e.planner) {
            planners.push(e.planner);
        }
    }
    let mut summary_csv = String::from("planner,stage,mean_out,se_out,mean_regret,se_regret\n");
    let mut curve_output_csv = String::from("planner,observations,mean,se\n");
    let mut curve_regret_csv = String::from("planner,observations,mean,se\n");
    for p in &planners {
        let stages = episodes
            .iter()
            .filter(|e| e.planner == *p)
            .map(|e| e.stages.len())
            .max()
            .unwrap_or(0);
        for s in 0..stages {
            let outs: Vec<f64> = episodes
                .iter()
                .filter(|e| e.planner == *p)
                .filter_map(|e| e.stages.get(s))
                .map(|r| r.avg_norm_output)
                .collect();
            let regrets: Vec<f64> = episodes
                .iter()
                .filter(|e| e.planner == *p)
                .filter_map(|e| e.stages.get(s))
                .map(|r| r.simple_regret)
                .collect();
            let (mo, so) = mean_se(&outs);
            let (mr, sr) = mean_se(&regrets);
            summary_csv.push_str(&format!(
                "{p},{s},{},{},{},{}\n",
                fmt_val(mo),
                fmt_val(so),
                fmt_val(mr),
                fmt_val(sr)
            ));
            let observations = (s + 1) * kappa;
            curve_output_csv.push_str(&format!(
                "{p},{observations},{},{}\n",
                fmt_val(mo),
                fmt_val(so)
            ));
            curve_regret_csv.push_str(&format!(
                "{p},{observations},{},{}\n",
                fmt_val(mr),
                fmt_val(sr)
            ));
        }
    }
    Summary {
        summary_csv,
        curve_output_csv,
        curve_regret_csv,
    }
}
