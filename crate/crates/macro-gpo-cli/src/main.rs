//! Command-line front end: simulate fields, plan single decisions, run
//! episodes, benchmark suites, and dump planner diagnostic tables.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use macro_gpo::anytime::{anytime_policy, preprocess, AnytimeBudget};
use macro_gpo::config::{ExperimentConfig, PlannerKind, StartSpec};
use macro_gpo::env::{sample_phenomenon, save_field};
use macro_gpo::harness::{
    build_catalog, build_environment, build_grid, load_observations, run_episode, run_suite,
    RunSettings,
};
use macro_gpo::planner::{resolve_sampling, ExactPlanner, PlannerConfig};
use macro_gpo::rng;
use macro_gpo::tables::PrefixTables;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "macro-gpo",
    about = "Nonmyopic GP optimization over macro-actions: planners, baselines, and a benchmark harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Master seed; overrides [suite] seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Anytime iteration budget; overrides [planner] iterations.
    #[arg(long, value_name = "N")]
    iterations: Option<u64>,
    /// Anytime wallclock budget in milliseconds; overrides iterations.
    #[arg(long, value_name = "N")]
    wallclock_ms: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a ground-truth field from the configured GP prior and write it
    /// as a field CSV.
    Simulate(Common),
    /// Compute a single decision from an observation file (header x,y,z; the
    /// last row is the agent's anchor).
    Plan {
        #[command(flatten)]
        common: Common,
        /// Observations gathered so far.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Run one full episode and write its per-stage metrics.
    Run(Common),
    /// Run the configured suite (planners x replications) and write metrics,
    /// summary, and plot-ready curve CSVs.
    Bench(Common),
    /// Precompute and dump the Lipschitz/theta/K diagnostics for the
    /// configured planning state.
    Tables(Common),
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(c) => simulate(&c),
        Command::Plan { common, data } => plan(&common, &data),
        Command::Run(c) => run(&c),
        Command::Bench(c) => bench(&c),
        Command::Tables(c) => tables(&c),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.suite.seed = seed;
    }
    if common.iterations.is_some() {
        cfg.planner.iterations = common.iterations;
    }
    if common.wallclock_ms.is_some() {
        cfg.planner.wallclock_ms = common.wallclock_ms;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let grid = build_grid(&cfg)?;
    let field = sample_phenomenon(&grid, &cfg.kernel, cfg.suite.seed)?;
    let path = dir.join("field.csv");
    save_field(&field, &path)?;
    let (max, at) = field.global_max();
    println!("wrote {} ({} cells)", path.display(), field.cells().len());
    println!("global max {max:.6} at {at}");
    Ok(())
}

fn plan(common: &Common, data_path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let data = load_observations(data_path)
        .with_context(|| format!("reading observations {}", data_path.display()))?;
    let anchor = match data.anchor() {
        Some(a) => a.clone(),
        None => bail!("the observation file is empty; the anchor is its last row"),
    };
    let catalog = build_catalog(&cfg)?;
    let seed = cfg.suite.seed;
    let horizon = cfg.planner.horizon;
    let beta = cfg.planner.beta;

    println!(
        "planning at {anchor} with {} ({} observations, H={horizon}, beta={beta})",
        cfg.planner.kind,
        data.len()
    );
    match cfg.planner.kind {
        PlannerKind::EpsilonMacroGpo => {
            let tables = PrefixTables::build(
                data.locations(),
                &anchor,
                &catalog,
                &cfg.kernel,
                horizon,
                macro_gpo::tables::DEFAULT_PREFIX_CAP,
            )?;
            let pcfg = PlannerConfig::new(horizon, beta, cfg.planner.budget.clone(), seed);
            let planner = ExactPlanner::new(&tables, &pcfg, catalog.a_max())?;
            let d = planner.epsilon_policy(&data)?;
            let s = d.sampling;
            println!(
                "N={} lambda={:.6e} delta={:.3} theta={:.6e} K={:.6e} nodes={}",
                s.n, s.lambda, s.delta, s.theta, s.k, d.nodes_explored
            );
            for sc in &d.scores {
                println!(
                    "  action {}: Q_sampled={:.6} Q_ml={:.6} -> {:.6} ({})",
                    sc.action_index,
                    sc.q_sampled,
                    sc.q_ml,
                    sc.q_eps,
                    if sc.used_sampled { "sampled" } else { "most-likely" }
                );
            }
            println!("chosen: {}", d.action);
        }
        PlannerKind::Anytime => {
            let pre = preprocess(
                &data,
                &anchor,
                &catalog,
                &cfg.kernel,
                horizon,
                beta,
                macro_gpo::tables::DEFAULT_PREFIX_CAP,
            )?;
            let pcfg = PlannerConfig::new(horizon, beta, cfg.planner.budget.clone(), seed);
            let budget = match (cfg.planner.iterations, cfg.planner.wallclock_ms) {
                (_, Some(ms)) => AnytimeBudget::WallclockMs(ms),
                (Some(it), None) => AnytimeBudget::Iterations(it),
                (None, None) => AnytimeBudget::Iterations(1500),
            };
            let out = anytime_policy(&pre, &pcfg, budget, macro_gpo::anytime::DEFAULT_RECORD_CAP)?;
            println!(
                "N={} lambda={:.6e} theta={:.6e} iterations={} omega={:.6e} nodes={}",
                out.n, out.lambda, out.theta, out.iterations, out.omega, out.nodes_explored
            );
            for sc in &out.scores {
                println!(
                    "  action {}: Q_lower={:.6} Q_ml={:.6} -> {:.6} ({})",
                    sc.action_index,
                    sc.q_lower,
                    sc.q_ml,
                    sc.q_used,
                    if sc.used_lower { "lower-bound" } else { "most-likely" }
                );
            }
            println!("chosen: {}", out.action);
        }
        PlannerKind::DbGpUcb => {
            let d = macro_gpo::baselines::db_gp_ucb(
                &data,
                &anchor,
                &catalog,
                &cfg.kernel,
                beta,
                macro_gpo::tables::DEFAULT_PREFIX_CAP,
            )?;
            println!("nodes={}", d.nodes);
            println!("chosen: {}", d.action);
        }
        PlannerKind::NonmyopicUcbMl => {
            let d = macro_gpo::baselines::nonmyopic_ucb_ml(
                &data,
                &anchor,
                &catalog,
                &cfg.kernel,
                horizon,
                beta,
                macro_gpo::tables::DEFAULT_PREFIX_CAP,
            )?;
            println!("nodes={}", d.nodes);
            println!("chosen: {}", d.action);
        }
        PlannerKind::GreedyUcb => {
            let d = macro_gpo::baselines::greedy_hallucinated_ucb(
                &data,
                &anchor,
                &catalog,
                &cfg.kernel,
                beta,
                cfg.planner.greedy_score,
            )?;
            println!("nodes={}", d.nodes);
            println!("chosen: {}", d.action);
        }
    }
    Ok(())
}

fn run(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let seed = cfg.suite.seed;
    let env = build_environment(&cfg, rng::mix(seed, 11))?;
    let start = match &cfg.suite.start {
        StartSpec::Cell(idx) => build_grid(&cfg)?.location(idx),
        StartSpec::Random => env.start_candidates[0].clone(),
    };
    let episode = run_episode(
        &env,
        cfg.planner.kind,
        &cfg,
        seed,
        &start,
        &RunSettings::default(),
    )?;
    let mut csv = String::from(
        "planner,seed,stage,action_index,avg_norm_output,simple_regret,nodes,millis\n",
    );
    for s in &episode.stages {
        csv.push_str(&format!(
            "{},{},{},{},{:.9e},{:.9e},{},{}\n",
            episode.planner,
            episode.seed,
            s.stage,
            s.action_index,
            s.avg_norm_output,
            s.simple_regret,
            s.nodes,
            s.millis
        ));
    }
    write(&dir.join("episode.csv"), &csv)?;
    if let Some(last) = episode.stages.last() {
        println!(
            "final avg normalized output {:.6}, simple regret {:.6}",
            last.avg_norm_output, last.simple_regret
        );
    }
    Ok(())
}

fn bench(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let out = run_suite(&cfg, &RunSettings::default())?;
    write(&dir.join("episodes.csv"), &out.metrics_csv)?;
    write(&dir.join("summary.csv"), &out.summary_csv)?;
    write(&dir.join("curve_output.csv"), &out.curve_output_csv)?;
    write(&dir.join("curve_regret.csv"), &out.curve_regret_csv)?;
    println!(
        "{} episodes across {} planners",
        out.episodes.len(),
        cfg.suite.planners.len()
    );
    Ok(())
}

fn tables(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let catalog = build_catalog(&cfg)?;
    let anchor = match &cfg.suite.start {
        StartSpec::Cell(idx) => build_grid(&cfg)?.location(idx),
        StartSpec::Random => match cfg.actions.kind {
            macro_gpo::config::ActionKind::CardinalDives => {
                let grid = build_grid(&cfg)?;
                let cells = grid.accessible_cells();
                grid.location(&cells[cells.len() / 2])
            }
            _ => bail!("tables needs an explicit suite.start for non-grid domains"),
        },
    };
    let horizon = cfg.planner.horizon;
    let t = PrefixTables::build(
        std::slice::from_ref(&anchor),
        &anchor,
        &catalog,
        &cfg.kernel,
        horizon,
        macro_gpo::tables::DEFAULT_PREFIX_CAP,
    )?;
    let pcfg = PlannerConfig::new(
        horizon,
        cfg.planner.beta,
        cfg.planner.budget.clone(),
        cfg.suite.seed,
    );
    let sampling = resolve_sampling(&pcfg, &t, catalog.a_max())?;

    let mut diag = String::from("quantity,value\n");
    diag.push_str(&format!("anchor,{anchor}\n"));
    diag.push_str(&format!("prefixes,{}\n", t.prefix_count()));
    diag.push_str(&format!("K,{:.17e}\n", t.k_max()));
    diag.push_str(&format!("L0,{:.17e}\n", t.root_lipschitz()));
    for stage in 0..horizon {
        diag.push_str(&format!("theta_{stage},{:.17e}\n", t.theta_stage(stage)));
    }
    diag.push_str(&format!("N,{}\n", sampling.n));
    diag.push_str(&format!("lambda,{:.17e}\n", sampling.lambda));
    diag.push_str(&format!("delta,{:.17e}\n", sampling.delta));
    write(&dir.join("tables.csv"), &diag)?;

    let mut lip = String::from("stage,action,alpha,lipschitz,trace,info_gain\n");
    for id in 0..t.prefix_count() {
        let n = t.node(id);
        lip.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            n.stage,
            n.action.to_string().replace(',', ";"),
            n.alpha,
            n.lipschitz,
            n.trace,
            n.info_gain
        ));
    }
    write(&dir.join("lipschitz.csv"), &lip)?;
    println!(
        "H={horizon} A={} K={:.6e} theta={:.6e} N={}",
        catalog.a_max(),
        t.k_max(),
        t.theta_max(),
        sampling.n
    );
    Ok(())
}
