//! Task environments: discretized domains, macro-action generation,
//! ground-truth phenomena (GP-sampled or file-backed), and noisy execution.

mod files;

pub use files::{load_field, load_graph, save_field, save_graph, Graph};

use crate::error::{Error, Result};
use crate::gp::{kernel_unchecked, KernelParams, Location};
use crate::linalg::Cholesky;
use crate::rng;
use std::collections::HashMap;

/// Largest accessible-cell count for exact joint field sampling.
const SAMPLE_CELL_CAP: usize = 10_000;

/// One axis of a grid: [min, max) split into `cells` cells; locations are
/// cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Extent {
    pub min: f64,
    pub max: f64,
    pub cells: usize,
}

impl Extent {
    pub fn step(&self) -> f64 {
        (self.max - self.min) / self.cells as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.step()
    }
}

/// A rectangular grid domain with an optional accessibility mask.
#[derive(Debug, Clone)]
pub struct GridDomain {
    extents: Vec<Extent>,
    /// Flattened row-major mask; absent means every cell is accessible.
    accessible: Option<Vec<bool>>,
}

impl GridDomain {
    pub fn new(extents: Vec<Extent>, accessible: Option<Vec<bool>>) -> Result<Self> {
        if extents.is_empty() {
            return Err(Error::invalid("domain needs at least one dimension"));
        }
        for e in &extents {
            if e.cells == 0 {
                return Err(Error::invalid("cell_count must be >= 1"));
            }
            if !(e.max > e.min) {
                return Err(Error::invalid(format!(
                    "extent max {} must exceed min {}",
                    e.max, e.min
                )));
            }
        }
        let total: usize = extents.iter().map(|e| e.cells).product();
        if let Some(mask) = &accessible {
            if mask.len() != total {
                return Err(Error::invalid(format!(
                    "mask has {} entries for a {}-cell grid",
                    mask.len(),
                    total
                )));
            }
        }
        Ok(GridDomain {
            extents,
            accessible,
        })
    }

    /// Uniform square helper used throughout the tests.
    pub fn square(min: f64, max: f64, cells: usize) -> Self {
        GridDomain::new(
            vec![
                Extent { min, max, cells },
                Extent { min, max, cells },
            ],
            None,
        )
        .expect("square extents are valid")
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[Extent] {
        &self.extents
    }

    pub fn cell_count(&self) -> usize {
        self.extents.iter().map(|e| e.cells).product()
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for (i, e) in idx.iter().zip(&self.extents) {
            f = f * e.cells + i;
        }
        f
    }

    pub fn location(&self, idx: &[usize]) -> Location {
        Location::new(
            idx.iter()
                .zip(&self.extents)
                .map(|(i, e)| e.coord(*i))
                .collect(),
        )
    }

    /// Invert a cell-center location back to indices.
    pub fn cell_of(&self, loc: &Location) -> Option<Vec<usize>> {
        if loc.dim() != self.dim() {
            return None;
        }
        let mut idx = Vec::with_capacity(self.dim());
        for (c, e) in loc.coords().iter().zip(&self.extents) {
            let f = (c - e.min) / e.step() - 0.5;
            let i = f.round();
            if i < 0.0 || i as usize >= e.cells || (f - i).abs() > 1e-6 {
                return None;
            }
            idx.push(i as usize);
        }
        Some(idx)
    }

    pub fn in_bounds(&self, idx: &[isize]) -> bool {
        idx.iter()
            .zip(&self.extents)
            .all(|(i, e)| *i >= 0 && (*i as usize) < e.cells)
    }

    pub fn is_accessible(&self, idx: &[usize]) -> bool {
        match &self.accessible {
            None => true,
            Some(mask) => mask[self.flat_index(idx)],
        }
    }

    /// All accessible cell indices in row-major order.
    pub fn accessible_cells(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut idx = vec![0usize; self.dim()];
        loop {
            if self.is_accessible(&idx) {
                out.push(idx.clone());
            }
            // Row-major increment.
            let mut d = self.dim();
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < self.extents[d].cells {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

/// An ordered sequence of kappa input locations executed atomically.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroAction {
    path: Vec<Location>,
}

impl MacroAction {
    pub fn new(path: Vec<Location>) -> Result<Self> {
        if path.is_empty() {
            return Err(Error::invalid("macro-action path must be nonempty"));
        }
        Ok(MacroAction { path })
    }

    pub fn path(&self) -> &[Location] {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }

    /// The agent's anchor after execution.
    pub fn terminus(&self) -> &Location {
        self.path.last().expect("path is nonempty")
    }

    /// Lexicographic order on flattened path coordinates; the deterministic
    /// tie-break used by every policy.
    pub fn total_cmp(&self, other: &MacroAction) -> std::cmp::Ordering {
        for (a, b) in self.path.iter().zip(&other.path) {
            let c = a.total_cmp(b);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        self.path.len().cmp(&other.path.len())
    }
}

impl std::fmt::Display for MacroAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, l) in self.path.iter().enumerate() {
            if i > 0 {
                write!(f, " -> ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// How a catalog's actions were generated.
#[derive(Debug, Clone, PartialEq)]
pub enum CatalogRule {
    CardinalDives,
    GraphPaths {
        downsample: Option<(usize, u64)>,
    },
    Explicit,
}

/// Per-anchor sets of available macro-actions.
#[derive(Debug, Clone)]
pub struct MacroActionCatalog {
    actions: HashMap<Vec<u64>, Vec<MacroAction>>,
    rule: CatalogRule,
    kappa: usize,
    a_max: usize,
}

impl MacroActionCatalog {
    fn from_map(
        actions: HashMap<Vec<u64>, Vec<MacroAction>>,
        rule: CatalogRule,
        kappa: usize,
    ) -> Self {
        let a_max = actions.values().map(Vec::len).max().unwrap_or(0);
        MacroActionCatalog {
            actions,
            rule,
            kappa,
            a_max,
        }
    }

    /// Straight dives of length kappa along each cardinal direction, for
    /// every accessible cell of the grid.
    pub fn cardinal(domain: &GridDomain, kappa: usize) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::invalid("kappa must be >= 1"));
        }
        let mut map = HashMap::new();
        for idx in domain.accessible_cells() {
            let anchor = domain.location(&idx);
            let acts = cardinal_macro_actions(&anchor, domain, kappa)?;
            map.insert(anchor.key(), acts);
        }
        Ok(MacroActionCatalog::from_map(
            map,
            CatalogRule::CardinalDives,
            kappa,
        ))
    }

    /// Simple kappa-step walks on a road/corridor graph, optionally
    /// downsampled per anchor without replacement.
    pub fn graph(graph: &Graph, kappa: usize, downsample: Option<(usize, u64)>) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::invalid("kappa must be >= 1"));
        }
        let mut map = HashMap::new();
        for node in graph.nodes() {
            let acts = graph_macro_actions(node, graph, kappa, downsample)?;
            map.insert(node.key(), acts);
        }
        Ok(MacroActionCatalog::from_map(
            map,
            CatalogRule::GraphPaths { downsample },
            kappa,
        ))
    }

    /// Explicitly listed actions keyed by anchor.
    pub fn explicit(entries: Vec<(Location, Vec<MacroAction>)>, kappa: usize) -> Result<Self> {
        let mut map = HashMap::new();
        for (anchor, acts) in entries {
            for a in &acts {
                if a.len() != kappa {
                    return Err(Error::invalid(format!(
                        "explicit action of length {} but kappa = {kappa}",
                        a.len()
                    )));
                }
            }
            map.insert(anchor.key(), acts);
        }
        Ok(MacroActionCatalog::from_map(map, CatalogRule::Explicit, kappa))
    }

    pub fn actions_from(&self, anchor: &Location) -> &[MacroAction] {
        self.actions
            .get(&anchor.key())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Largest number of actions available at any anchor (the A in the
    /// sample-size formulas).
    pub fn a_max(&self) -> usize {
        self.a_max
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn rule(&self) -> &CatalogRule {
        &self.rule
    }
}

/// Where a realization came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Sampled { seed: u64 },
    Loaded { path: String },
}

/// A frozen ground-truth scalar field (latent y) over accessible cells.
#[derive(Debug, Clone)]
pub struct PhenomenonRealization {
    cells: Vec<(Location, f64)>,
    index: HashMap<Vec<u64>, usize>,
    provenance: Provenance,
    global_max: (f64, Location),
}

impl PhenomenonRealization {
    pub fn new(cells: Vec<(Location, f64)>, provenance: Provenance) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("realization needs at least one cell"));
        }
        let mut index = HashMap::with_capacity(cells.len());
        let mut best = 0usize;
        for (i, (loc, v)) in cells.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite field value at {loc}")));
            }
            index.insert(loc.key(), i);
            if *v > cells[best].1 {
                best = i;
            }
        }
        let global_max = (cells[best].1, cells[best].0.clone());
        Ok(PhenomenonRealization {
            cells,
            index,
            provenance,
            global_max,
        })
    }

    pub fn value_at(&self, loc: &Location) -> Option<f64> {
        self.index.get(&loc.key()).map(|i| self.cells[*i].1)
    }

    pub fn cells(&self) -> &[(Location, f64)] {
        &self.cells
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Maximum latent value over accessible cells and where it sits.
    pub fn global_max(&self) -> (f64, &Location) {
        (self.global_max.0, &self.global_max.1)
    }
}

/// Escalating-jitter factorization for noise-free latent grams, which are
/// far closer to singular than measurement grams.
fn factor_latent(n: usize, sym: &dyn Fn(usize, usize) -> f64, scale: f64) -> Result<Cholesky> {
    let mut jitter = 0.0;
    loop {
        let got = Cholesky::factor(n, |i, j| sym(i, j) + if i == j { jitter } else { 0.0 });
        match got {
            Ok(c) => return Ok(c),
            Err(b) => {
                let next = if jitter == 0.0 {
                    1e-12 * scale.max(1e-300)
                } else {
                    jitter * 100.0
                };
                if next > 1e-4 * scale {
                    return Err(Error::numerical(format!(
                        "latent gram factorization failed at pivot {}/{} (residual {:.3e}) \
                         even with jitter {:.3e}",
                        b.pivot, n, b.residual, jitter
                    )));
                }
                jitter = next;
            }
        }
    }
}

/// Draw one joint latent-field realization (no observation noise) from the
/// GP prior over all accessible cells. Deterministic per seed.
///
/// Full 2-D grids use the kernel's axis separability (the gram is a Kronecker
/// product of two small axis grams), which keeps 50x50 sampling instant;
/// masked or higher-dimensional domains fall back to a dense factorization.
pub fn sample_phenomenon(
    domain: &GridDomain,
    params: &KernelParams,
    seed: u64,
) -> Result<PhenomenonRealization> {
    params.validate()?;
    if params.dim() != domain.dim() {
        return Err(Error::invalid(format!(
            "kernel dimension {} does not match domain dimension {}",
            params.dim(),
            domain.dim()
        )));
    }
    let cells = domain.accessible_cells();
    if cells.len() > SAMPLE_CELL_CAP {
        return Err(Error::capability(format!(
            "exact joint sampling over {} cells exceeds the {} cap; \
             shrink the domain or sample blockwise",
            cells.len(),
            SAMPLE_CELL_CAP
        )));
    }
    if cells.is_empty() {
        return Err(Error::invalid("domain has no accessible cells"));
    }

    let mut r = rng::stream(rng::mix(seed, 0x6669656c64));
    let values = if domain.dim() == 2 && domain.accessible.is_none() {
        sample_full_grid_2d(domain, params, &mut r)?
    } else {
        sample_dense(domain, &cells, params, &mut r)?
    };

    let data: Vec<(Location, f64)> = cells
        .iter()
        .zip(values)
        .map(|(idx, v)| (domain.location(idx), v))
        .collect();
    PhenomenonRealization::new(data, Provenance::Sampled { seed })
}

fn sample_dense(
    domain: &GridDomain,
    cells: &[Vec<usize>],
    params: &KernelParams,
    r: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<f64>> {
    let n = cells.len();
    if params.signal_variance == 0.0 {
        // Degenerate field: constant at the prior mean. Still consume the
        // stream so seeds stay comparable across hyperparameters.
        let _ = rng::standard_normals(r, n);
        return Ok(vec![params.prior_mean; n]);
    }
    let locs: Vec<Location> = cells.iter().map(|i| domain.location(i)).collect();
    let chol = factor_latent(
        n,
        &|i, j| kernel_unchecked(&locs[i], &locs[j], params),
        params.signal_variance,
    )?;
    let x = rng::standard_normals(r, n);
    Ok(chol
        .mul_lower(&x)
        .into_iter()
        .map(|v| params.prior_mean + v)
        .collect())
}

fn sample_full_grid_2d(
    domain: &GridDomain,
    params: &KernelParams,
    r: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<f64>> {
    let (ex, ey) = (&domain.extents[0], &domain.extents[1]);
    let (nx, ny) = (ex.cells, ey.cells);
    if params.signal_variance == 0.0 {
        let _ = rng::standard_normals(r, nx * ny);
        return Ok(vec![params.prior_mean; nx * ny]);
    }
    let axis_gram = |e: &Extent, l: f64, n: usize| -> Result<Cholesky> {
        factor_latent(
            n,
            &|i, j| {
                let d = (e.coord(i) - e.coord(j)) / l;
                (-0.5 * d * d).exp()
            },
            1.0,
        )
    };
    let lx = axis_gram(ex, params.length_scales[0], nx)?;
    let ly = axis_gram(ey, params.length_scales[1], ny)?;
    let x = rng::standard_normals(r, nx * ny);
    // y = sigma_y (Lx (x) Ly) vec(X): first Ly along the y axis, then Lx.
    let ldx = lx.to_dense();
    let ldy = ly.to_dense();
    let sigma = params.signal_variance.sqrt();
    let mut tmp = vec![0.0; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let mut s = 0.0;
            for jy in 0..=iy {
                s += ldy.at(iy, jy) * x[ix * ny + jy];
            }
            tmp[ix * ny + iy] = s;
        }
    }
    let mut out = vec![0.0; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let mut s = 0.0;
            for jx in 0..=ix {
                s += ldx.at(ix, jx) * tmp[jx * ny + iy];
            }
            out[ix * ny + iy] = params.prior_mean + sigma * s;
        }
    }
    Ok(out)
}

/// Up to 2*dim straight paths of kappa steps from `s`; paths that would
/// leave the grid or touch an inaccessible cell are excluded. The first path
/// cell is adjacent to the anchor.
pub fn cardinal_macro_actions(
    s: &Location,
    domain: &GridDomain,
    kappa: usize,
) -> Result<Vec<MacroAction>> {
    let idx = domain
        .cell_of(s)
        .ok_or_else(|| Error::invalid(format!("anchor {s} is not a cell of the domain")))?;
    let dim = domain.dim();
    let mut dirs: Vec<Vec<isize>> = Vec::with_capacity(2 * dim);
    for d in 0..dim {
        for sign in [-1isize, 1] {
            let mut v = vec![0isize; dim];
            v[d] = sign;
            dirs.push(v);
        }
    }
    let mut out = Vec::new();
    'dir: for dir in dirs {
        let mut path = Vec::with_capacity(kappa);
        for step in 1..=kappa {
            let probe: Vec<isize> = idx
                .iter()
                .zip(&dir)
                .map(|(i, d)| *i as isize + d * step as isize)
                .collect();
            if !domain.in_bounds(&probe) {
                continue 'dir;
            }
            let cell: Vec<usize> = probe.iter().map(|v| *v as usize).collect();
            if !domain.is_accessible(&cell) {
                continue 'dir;
            }
            path.push(domain.location(&cell));
        }
        out.push(MacroAction::new(path)?);
    }
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}

/// Simple (node-distinct) kappa-step walks from a graph node, optionally
/// downsampled without replacement. Deterministic per seed.
pub fn graph_macro_actions(
    s: &Location,
    graph: &Graph,
    kappa: usize,
    downsample: Option<(usize, u64)>,
) -> Result<Vec<MacroAction>> {
    let start = graph
        .node_index(s)
        .ok_or_else(|| Error::invalid(format!("node {s} is not in the graph")))?;
    let mut walks: Vec<Vec<usize>> = Vec::new();
    let mut stack = vec![start];
    dfs_walks(graph, &mut stack, kappa, &mut walks);
    let mut actions: Vec<MacroAction> = walks
        .into_iter()
        .map(|w| {
            MacroAction::new(w.into_iter().map(|i| graph.nodes()[i].clone()).collect())
                .expect("walks have kappa >= 1 nodes")
        })
        .collect();
    actions.sort_by(|a, b| a.total_cmp(b));
    if let Some((count, seed)) = downsample {
        if actions.len() > count {
            // Seeded partial Fisher-Yates over the sorted list; the anchor's
            // key is mixed in so every node downsamples independently.
            let mut r = rng::stream(rng::mix_many(seed, &s.key()));
            let n = actions.len();
            for i in 0..count {
                let j = i + (rand::Rng::gen_range(&mut r, 0..(n - i) as u64) as usize);
                actions.swap(i, j);
            }
            actions.truncate(count);
            actions.sort_by(|a, b| a.total_cmp(b));
        }
    }
    Ok(actions)
}

fn dfs_walks(graph: &Graph, stack: &mut Vec<usize>, kappa: usize, out: &mut Vec<Vec<usize>>) {
    if stack.len() == kappa + 1 {
        out.push(stack[1..].to_vec());
        return;
    }
    let here = *stack.last().expect("stack nonempty");
    for &next in graph.neighbors(here) {
        if stack.contains(&next) {
            continue;
        }
        stack.push(next);
        dfs_walks(graph, stack, kappa, out);
        stack.pop();
    }
}

/// Execute a macro-action against the frozen field: latent value at each
/// path cell plus i.i.d. Gaussian noise. Deterministic per rng state.
pub fn execute(
    realization: &PhenomenonRealization,
    action: &MacroAction,
    noise_variance: f64,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<f64>> {
    if noise_variance < 0.0 {
        return Err(Error::invalid("noise_variance must be >= 0"));
    }
    let mut out = Vec::with_capacity(action.len());
    let noise = rng::standard_normals(rng, action.len());
    let sd = noise_variance.sqrt();
    for (loc, eps) in action.path().iter().zip(noise) {
        let y = realization
            .value_at(loc)
            .ok_or_else(|| Error::invalid(format!("path cell {loc} is not accessible")))?;
        out.push(y + sd * eps);
    }
    Ok(out)
}
