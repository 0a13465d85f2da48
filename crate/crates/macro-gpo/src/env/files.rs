//! File-backed environment data: scalar fields and road/corridor graphs as
//! plain CSV. Writers emit 17-significant-digit decimals so a load/save
//! round trip is bit-exact.

use super::{PhenomenonRealization, Provenance};
use crate::error::{Error, Result};
use crate::gp::Location;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Directed adjacency over 2-D node locations. Duplicate edges collapse to
/// one; a node mentioned only as an endpoint still becomes a node.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Location>,
    index: HashMap<Vec<u64>, usize>,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn from_edges(edges: Vec<(Location, Location)>) -> Result<Self> {
        let mut nodes: Vec<Location> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut intern = |loc: Location, nodes: &mut Vec<Location>| -> usize {
            let key = loc.key();
            *index.entry(key).or_insert_with(|| {
                nodes.push(loc);
                nodes.len() - 1
            })
        };
        let mut pairs = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a.dim() != 2 || b.dim() != 2 {
                return Err(Error::invalid("graph nodes must be 2-D"));
            }
            let ia = intern(a, &mut nodes);
            let ib = intern(b, &mut nodes);
            pairs.push((ia, ib));
        }
        let mut adj = vec![Vec::new(); nodes.len()];
        for (a, b) in pairs {
            if !adj[a].contains(&b) {
                adj[a].push(b);
            }
        }
        // Deterministic neighbor order: by node coordinates.
        for list in &mut adj {
            list.sort_by(|x, y| nodes[*x].total_cmp(&nodes[*y]));
        }
        Ok(Graph { nodes, index, adj })
    }

    pub fn nodes(&self) -> &[Location] {
        &self.nodes
    }

    pub fn node_index(&self, loc: &Location) -> Option<usize> {
        self.index.get(&loc.key()).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn out_degree(&self, loc: &Location) -> Option<usize> {
        self.node_index(loc).map(|i| self.adj[i].len())
    }
}

fn fmt17(v: f64) -> String {
    // 17 significant digits round-trip any f64 exactly.
    format!("{v:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("expected a number, got {tok:?}"),
    })
}

/// Field file: header `x,y,value`, one row per accessible cell.
pub fn save_field(realization: &PhenomenonRealization, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,value")?;
    for (loc, v) in realization.cells() {
        if loc.dim() != 2 {
            return Err(Error::invalid("field files are 2-D"));
        }
        writeln!(
            f,
            "{},{},{}",
            fmt17(loc.coords()[0]),
            fmt17(loc.coords()[1]),
            fmt17(*v)
        )?;
    }
    Ok(())
}

pub fn load_field(path: &Path) -> Result<PhenomenonRealization> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut cells = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 {
            if trimmed != "x,y,value" {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected header `x,y,value`, got {trimmed:?}"),
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
        let x = parse_f64(cols[0], lineno)?;
        let y = parse_f64(cols[1], lineno)?;
        let v = parse_f64(cols[2], lineno)?;
        cells.push((Location::new(vec![x, y]), v));
    }
    PhenomenonRealization::new(
        cells,
        Provenance::Loaded {
            path: path.display().to_string(),
        },
    )
}

/// Graph file: header `from_x,from_y,to_x,to_y`, one directed edge per row.
pub fn save_graph(graph: &Graph, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "from_x,from_y,to_x,to_y")?;
    for (i, from) in graph.nodes().iter().enumerate() {
        for &j in graph.neighbors(i) {
            let to = &graph.nodes()[j];
            writeln!(
                f,
                "{},{},{},{}",
                fmt17(from.coords()[0]),
                fmt17(from.coords()[1]),
                fmt17(to.coords()[0]),
                fmt17(to.coords()[1])
            )?;
        }
    }
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut edges = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 {
            if trimmed != "from_x,from_y,to_x,to_y" {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected header `from_x,from_y,to_x,to_y`, got {trimmed:?}"),
                });
            }
            continue;
        }
        let cols: Vec<&str> = trimmed.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 columns, got {}", cols.len()),
            });
        }
        let fx = parse_f64(cols[0], lineno)?;
        let fy = parse_f64(cols[1], lineno)?;
        let tx = parse_f64(cols[2], lineno)?;
        let ty = parse_f64(cols[3], lineno)?;
        edges.push((Location::new(vec![fx, fy]), Location::new(vec![tx, ty])));
    }
    Graph::from_edges(edges)
}
