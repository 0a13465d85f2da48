//! Experiment configuration: a sectioned key-value text format with
//! `[kernel]`, `[domain]`, `[actions]`, `[planner]`, and `[suite]` sections.
//! Keys mirror the type fields they populate; `#` starts a comment.

use crate::baselines::GreedyScore;
use crate::error::{Error, Result};
use crate::gp::KernelParams;
use crate::planner::SampleBudget;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Which policy drives an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlannerKind {
    EpsilonMacroGpo,
    Anytime,
    DbGpUcb,
    NonmyopicUcbMl,
    GreedyUcb,
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon-macro-gpo" => Ok(PlannerKind::EpsilonMacroGpo),
            "anytime" => Ok(PlannerKind::Anytime),
            "db-gp-ucb" => Ok(PlannerKind::DbGpUcb),
            "nonmyopic-ucb-ml" => Ok(PlannerKind::NonmyopicUcbMl),
            "greedy-ucb" => Ok(PlannerKind::GreedyUcb),
            other => Err(Error::Config(format!(
                "unknown planner kind {other:?}; expected one of epsilon-macro-gpo, anytime, \
                 db-gp-ucb, nonmyopic-ucb-ml, greedy-ucb"
            ))),
        }
    }
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PlannerKind::EpsilonMacroGpo => "epsilon-macro-gpo",
            PlannerKind::Anytime => "anytime",
            PlannerKind::DbGpUcb => "db-gp-ucb",
            PlannerKind::NonmyopicUcbMl => "nonmyopic-ucb-ml",
            PlannerKind::GreedyUcb => "greedy-ucb",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSection {
    pub grid: Option<GridSpec>,
    pub field_file: Option<PathBuf>,
    pub graph_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    CardinalDives,
    GraphPaths,
    ExplicitFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionsSection {
    pub kind: ActionKind,
    pub kappa: usize,
    pub downsample: Option<(usize, u64)>,
    pub actions_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerSection {
    pub kind: PlannerKind,
    pub horizon: usize,
    pub beta: f64,
    pub budget: SampleBudget,
    /// Anytime iteration budget (one tree-construction pass per iteration).
    pub iterations: Option<u64>,
    pub wallclock_ms: Option<u64>,
    pub greedy_score: GreedyScore,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StartSpec {
    /// Grid cell indices (or the nearest graph node to these coordinates).
    Cell(Vec<usize>),
    /// A fresh random accessible cell/node per replication.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSection {
    pub replications: usize,
    pub seed: u64,
    /// Total observations per episode; must be divisible by kappa.
    pub budget: usize,
    pub workers: usize,
    pub planners: Vec<PlannerKind>,
    pub start: StartSpec,
    /// Optional explicit prior observations (coords..., z) per row;
    /// defaults to one noise-free observation at the start location.
    pub prior_obs: Option<Vec<(Vec<f64>, f64)>>,
    /// Optional extra noise-free-equivalent prior observations whose values
    /// are read off the realized field (e.g. a buoy): coordinate rows.
    pub prior_latent_obs: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kernel: KernelParams,
    pub domain: DomainSection,
    pub actions: ActionsSection,
    pub planner: PlannerSection,
    pub suite: SuiteSection,
    /// FNV-1a over the normalized significant lines; identifies a config in
    /// episode records.
    pub config_hash: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        let config_hash = raw.fnv_hash();

        let kernel = KernelParams {
            prior_mean: raw.f64_or("kernel", "prior_mean", 0.0)?,
            signal_variance: raw.required_f64("kernel", "signal_variance")?,
            noise_variance: raw.required_f64("kernel", "noise_variance")?,
            length_scales: raw.required_f64_list("kernel", "length_scales")?,
        };
        kernel.validate()?;

        let grid = match (
            raw.f64_list("domain", "min")?,
            raw.f64_list("domain", "max")?,
            raw.usize_list("domain", "cells")?,
        ) {
            (Some(min), Some(max), Some(cells)) => {
                if min.len() != max.len() || min.len() != cells.len() {
                    return Err(Error::Config(
                        "domain min/max/cells must have equal lengths".into(),
                    ));
                }
                Some(GridSpec { min, max, cells })
            }
            (None, None, None) => None,
            _ => {
                return Err(Error::Config(
                    "domain needs all of min, max, cells or none of them".into(),
                ))
            }
        };
        let domain = DomainSection {
            grid,
            field_file: raw.path("domain", "field_file"),
            graph_file: raw.path("domain", "graph_file"),
        };

        let kind = match raw.str_or("actions", "kind", "cardinal-dives")?.as_str() {
            "cardinal-dives" => ActionKind::CardinalDives,
            "graph-paths" => ActionKind::GraphPaths,
            "explicit-file" => ActionKind::ExplicitFile,
            other => {
                return Err(Error::Config(format!(
                    "unknown actions kind {other:?}"
                )))
            }
        };
        let downsample = match (
            raw.usize_opt("actions", "downsample_count")?,
            raw.u64_opt("actions", "downsample_seed")?,
        ) {
            (Some(c), Some(s)) => Some((c, s)),
            (Some(c), None) => Some((c, 0)),
            (None, Some(_)) => {
                return Err(Error::Config(
                    "downsample_seed given without downsample_count".into(),
                ))
            }
            (None, None) => None,
        };
        let actions = ActionsSection {
            kind,
            kappa: raw.required_usize("actions", "kappa")?,
            downsample,
            actions_file: raw.path("actions", "actions_file"),
        };

        let budget = match (
            raw.usize_opt("planner", "N")?,
            raw.f64_opt("planner", "epsilon")?,
            raw.f64_opt("planner", "lambda")?,
            raw.f64_opt("planner", "delta")?,
        ) {
            (Some(n), None, None, None) => SampleBudget::Fixed(n),
            (None, Some(e), None, None) => SampleBudget::LossBound { epsilon: e },
            (None, None, Some(l), Some(d)) => SampleBudget::StageBound {
                lambda: l,
                delta: d,
            },
            (None, None, None, None) => SampleBudget::Fixed(100),
            _ => {
                return Err(Error::Config(
                    "exactly one of N, epsilon, or lambda+delta may drive the sample count"
                        .into(),
                ))
            }
        };
        let greedy_score = match raw.str_or("planner", "greedy_score", "ucb")?.as_str() {
            "ucb" => GreedyScore::Ucb,
            "ei" => GreedyScore::ExpectedImprovement,
            other => {
                return Err(Error::Config(format!(
                    "unknown greedy_score {other:?}; expected ucb or ei"
                )))
            }
        };
        let planner = PlannerSection {
            kind: raw.str_or("planner", "kind", "epsilon-macro-gpo")?.parse()?,
            horizon: raw.usize_or("planner", "H", 1)?,
            beta: raw.f64_or("planner", "beta", 0.0)?,
            budget,
            iterations: raw.u64_opt("planner", "iterations")?,
            wallclock_ms: raw.u64_opt("planner", "wallclock_ms")?,
            greedy_score,
        };

        let planners = match raw.str_opt("suite", "planners") {
            Some(list) => list
                .split(',')
                .map(|p| p.trim().parse::<PlannerKind>())
                .collect::<Result<Vec<_>>>()?,
            None => vec![planner.kind],
        };
        let start = match raw.str_opt("suite", "start") {
            None => StartSpec::Random,
            Some(s) if s.trim() == "random" => StartSpec::Random,
            Some(s) => StartSpec::Cell(parse_usize_list(&s)?),
        };
        let prior_obs = match raw.str_opt("suite", "prior_obs") {
            None => None,
            Some(s) => {
                let mut rows = Vec::new();
                for row in s.split(';') {
                    let vals = parse_f64_list(row)?;
                    if vals.len() != kernel.dim() + 1 {
                        return Err(Error::Config(format!(
                            "prior_obs row needs {} coordinates plus a value",
                            kernel.dim()
                        )));
                    }
                    let (coords, z) = vals.split_at(kernel.dim());
                    rows.push((coords.to_vec(), z[0]));
                }
                Some(rows)
            }
        };
        let prior_latent_obs = match raw.str_opt("suite", "prior_latent_obs") {
            None => None,
            Some(s) => {
                let mut rows = Vec::new();
                for row in s.split(';') {
                    let vals = parse_f64_list(row)?;
                    if vals.len() != kernel.dim() {
                        return Err(Error::Config(format!(
                            "prior_latent_obs row needs {} coordinates",
                            kernel.dim()
                        )));
                    }
                    rows.push(vals);
                }
                Some(rows)
            }
        };
        let suite = SuiteSection {
            replications: raw.usize_or("suite", "replications", 1)?,
            seed: raw.u64_or("suite", "seed", 0)?,
            budget: raw.required_usize("suite", "budget")?,
            workers: raw.usize_or("suite", "workers", 1)?.max(1),
            planners,
            start,
            prior_obs,
            prior_latent_obs,
        };
        if suite.budget % actions.kappa != 0 {
            return Err(Error::Config(format!(
                "budget {} is not divisible by kappa {}",
                suite.budget, actions.kappa
            )));
        }

        raw.reject_unknown_keys()?;

        Ok(ExperimentConfig {
            kernel,
            domain,
            actions,
            planner,
            suite,
            config_hash,
        })
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("expected a number, got {t:?}")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("expected an integer, got {t:?}")))
        })
        .collect()
}

/// Known (section, key) pairs; anything else is a config error, which
/// catches typos early.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("kernel", "prior_mean"),
    ("kernel", "signal_variance"),
    ("kernel", "noise_variance"),
    ("kernel", "length_scales"),
    ("domain", "min"),
    ("domain", "max"),
    ("domain", "cells"),
    ("domain", "field_file"),
    ("domain", "graph_file"),
    ("actions", "kind"),
    ("actions", "kappa"),
    ("actions", "downsample_count"),
    ("actions", "downsample_seed"),
    ("actions", "actions_file"),
    ("planner", "kind"),
    ("planner", "H"),
    ("planner", "beta"),
    ("planner", "N"),
    ("planner", "epsilon"),
    ("planner", "lambda"),
    ("planner", "delta"),
    ("planner", "iterations"),
    ("planner", "wallclock_ms"),
    ("planner", "greedy_score"),
    ("suite", "replications"),
    ("suite", "seed"),
    ("suite", "budget"),
    ("suite", "workers"),
    ("suite", "planners"),
    ("suite", "start"),
    ("suite", "prior_obs"),
    ("suite", "prior_latent_obs"),
];

struct RawConfig {
    entries: BTreeMap<(String, String), String>,
    /// Normalized significant lines in file order, for hashing.
    normalized: Vec<String>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut normalized = Vec::new();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(Error::Parse {
                    line: lineno,
                    msg: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                normalized.push(format!("[{section}]"));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            if section.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "key before any [section]".into(),
                });
            }
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            normalized.push(format!("{section}.{key}={value}"));
            if entries
                .insert((section.clone(), key.clone()), value)
                .is_some()
            {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("duplicate key {section}.{key}"),
                });
            }
        }
        Ok(RawConfig {
            entries,
            normalized,
        })
    }

    fn fnv_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for line in &self.normalized {
            for b in line.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            h ^= b'\n' as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    fn str_opt(&self, section: &str, key: &str) -> Option<String> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .cloned()
    }

    fn str_or(&self, section: &str, key: &str, default: &str) -> Result<String> {
        Ok(self.str_opt(section, key).unwrap_or_else(|| default.to_string()))
    }

    fn f64_opt(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.str_opt(section, key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    Error::Config(format!("{section}.{key}: expected a number, got {v:?}"))
                })
            })
            .transpose()
    }

    fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(section, key)?.unwrap_or(default))
    }

    fn required_f64(&self, section: &str, key: &str) -> Result<f64> {
        self.f64_opt(section, key)?
            .ok_or_else(|| Error::Config(format!("missing required key {section}.{key}")))
    }

    fn usize_opt(&self, section: &str, key: &str) -> Result<Option<usize>> {
        self.str_opt(section, key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    Error::Config(format!(
                        "{section}.{key}: expected an integer, got {v:?}"
                    ))
                })
            })
            .transpose()
    }

    fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        Ok(self.usize_opt(section, key)?.unwrap_or(default))
    }

    fn required_usize(&self, section: &str, key: &str) -> Result<usize> {
        self.usize_opt(section, key)?
            .ok_or_else(|| Error::Config(format!("missing required key {section}.{key}")))
    }

    fn u64_opt(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.str_opt(section, key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| {
                    Error::Config(format!(
                        "{section}.{key}: expected an unsigned integer, got {v:?}"
                    ))
                })
            })
            .transpose()
    }

    fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        Ok(self.u64_opt(section, key)?.unwrap_or(default))
    }

    fn f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        self.str_opt(section, key).map(|v| parse_f64_list(&v)).transpose()
    }

    fn required_f64_list(&self, section: &str, key: &str) -> Result<Vec<f64>> {
        self.f64_list(section, key)?
            .ok_or_else(|| Error::Config(format!("missing required key {section}.{key}")))
    }

    fn usize_list(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>> {
        self.str_opt(section, key)
            .map(|v| parse_usize_list(&v))
            .transpose()
    }

    fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.str_opt(section, key).map(PathBuf::from)
    }

    fn reject_unknown_keys(&self) -> Result<()> {
        for (section, key) in self.entries.keys() {
            if !KNOWN_KEYS
                .iter()
                .any(|(s, k)| s == section && k == key)
            {
                return Err(Error::Config(format!("unknown key {section}.{key}")));
            }
        }
        Ok(())
    }
}
