//! Heterogeneous foreign-key graph, connected components and topology
//! resampling.
//!
//! Nodes are records; a node is addressed either as `(table, row)` or by a
//! global id `offset[table] + row`. Every foreign-key column is one edge type
//! and, since foreign keys are never missing, each child row has exactly one
//! parent per edge type.

use std::fmt::Write as _;

use rand::Rng;

use crate::relschema::{ColumnData, RelationalDataset};
use crate::rng;

/// Fraction of nodes above which the largest component makes the graph
/// "connected" and resampling keeps the original topology.
pub const LARGE_COMPONENT_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeType {
    pub child_table: usize,
    pub fk_column: usize,
    pub parent_table: usize,
    /// Parent row for each child row.
    pub parent_of: Vec<usize>,
}

impl EdgeType {
    /// Children of every parent row, in ascending child order.
    pub fn children_of(&self, n_parents: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_parents];
        for (child, &p) in self.parent_of.iter().enumerate() {
            out[p].push(child);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeteroGraph {
    pub node_counts: Vec<usize>,
    pub edge_types: Vec<EdgeType>,
}

impl HeteroGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_counts.iter().sum()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_types.iter().map(|e| e.parent_of.len()).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.node_counts
            .iter()
            .map(|&n| {
                let o = acc;
                acc += n;
                o
            })
            .collect()
    }

    /// `(table, row)` of a global node id.
    pub fn locate(&self, node: usize) -> (usize, usize) {
        let mut rest = node;
        for (t, &n) in self.node_counts.iter().enumerate() {
            if rest < n {
                return (t, rest);
            }
            rest -= n;
        }
        panic!("node {node} out of range");
    }
}

pub fn build_graph(ds: &RelationalDataset) -> HeteroGraph {
    let edge_types = ds
        .schema
        .foreign_keys()
        .into_iter()
        .map(|fk| {
            let ColumnData::ForeignKey(parents) = &ds.tables[fk.child_table].columns[fk.column] else {
                unreachable!("validated dataset stores foreign keys as row indices")
            };
            EdgeType {
                child_table: fk.child_table,
                fk_column: fk.column,
                parent_table: fk.parent_table,
                parent_of: parents.clone(),
            }
        })
        .collect();
    HeteroGraph {
        node_counts: ds.row_counts(),
        edge_types,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentIndex {
    /// Component id per global node: the smallest node id in the component.
    pub component_of: Vec<usize>,
    /// Members of each component (ascending), components ordered by id.
    pub members: Vec<Vec<usize>>,
    /// Per-component node count per table.
    pub table_counts: Vec<Vec<usize>>,
}

impl ComponentIndex {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn largest(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn largest_fraction(&self) -> f64 {
        let total = self.component_of.len();
        if total == 0 {
            return 0.0;
        }
        self.largest() as f64 / total as f64
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Union keeping the smaller id as root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

pub fn connected_components(g: &HeteroGraph) -> ComponentIndex {
    let n = g.num_nodes();
    let offsets = g.offsets();
    let mut dsu = DisjointSet {
        parent: (0..n).collect(),
    };
    for et in &g.edge_types {
        for (child, &parent) in et.parent_of.iter().enumerate() {
            dsu.union(offsets[et.child_table] + child, offsets[et.parent_table] + parent);
        }
    }
    let component_of: Vec<usize> = (0..n).map(|v| dsu.find(v)).collect();

    let mut slot = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (v, &root) in component_of.iter().enumerate() {
        if slot[root] == usize::MAX {
            slot[root] = members.len();
            members.push(Vec::new());
        }
        members[slot[root]].push(v);
    }
    let table_counts = members
        .iter()
        .map(|m| {
            let mut counts = vec![0; g.node_counts.len()];
            for &v in m {
                counts[g.locate(v).0] += 1;
            }
            counts
        })
        .collect();
    ComponentIndex {
        component_of,
        members,
        table_counts,
    }
}

/// A sampled topology plus, for every new node, the original node it copies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resampled {
    pub graph: HeteroGraph,
    /// `origin[table][new_row]` = original row in the same table.
    pub origin: Vec<Vec<usize>>,
    /// Whether the original topology was kept as is.
    pub kept_original: bool,
}

/// Keep the topology when one component dominates, otherwise draw as many
/// components as the original has, uniformly with replacement.
pub fn resample_topology(g: &HeteroGraph, comps: &ComponentIndex, seed: u64) -> Resampled {
    if comps.is_empty() || comps.largest_fraction() > LARGE_COMPONENT_FRACTION {
        return Resampled {
            graph: g.clone(),
            origin: g.node_counts.iter().map(|&n| (0..n).collect()).collect(),
            kept_original: true,
        };
    }
    let mut rng = rng::stream(seed, rng::TOPOLOGY);
    let draws: Vec<usize> = (0..comps.len()).map(|_| rng.random_range(0..comps.len())).collect();
    instantiate(g, comps, &draws)
}

/// Build a graph from copies of the listed components (with repetition).
pub fn instantiate(g: &HeteroGraph, comps: &ComponentIndex, draws: &[usize]) -> Resampled {
    let n_tables = g.node_counts.len();
    let mut origin: Vec<Vec<usize>> = vec![Vec::new(); n_tables];
    let mut edge_types: Vec<EdgeType> = g
        .edge_types
        .iter()
        .map(|e| EdgeType {
            parent_of: Vec::new(),
            ..e.clone()
        })
        .collect();
    // original (table, row) -> new row, reset per drawn copy
    let offsets = g.offsets();
    let mut new_row = vec![usize::MAX; g.num_nodes()];
    for &c in draws {
        let members = &comps.members[c];
        for &v in members {
            let (t, row) = g.locate(v);
            new_row[v] = origin[t].len();
            origin[t].push(row);
        }
        for (et, out) in g.edge_types.iter().zip(&mut edge_types) {
            for &v in members {
                let (t, row) = g.locate(v);
                if t == et.child_table {
                    let parent = offsets[et.parent_table] + et.parent_of[row];
                    out.parent_of.push(new_row[parent]);
                }
            }
        }
    }
    let node_counts = origin.iter().map(Vec::len).collect();
    Resampled {
        graph: HeteroGraph {
            node_counts,
            edge_types,
        },
        origin,
        kept_original: false,
    }
}

/// Human-readable graph statistics.
pub fn graph_report(ds: &RelationalDataset, g: &HeteroGraph, comps: &ComponentIndex) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "nodes: {}", g.num_nodes());
    for (spec, n) in ds.schema.tables.iter().zip(&g.node_counts) {
        let _ = writeln!(s, "  {}: {n}", spec.name);
    }
    let _ = writeln!(s, "edges: {}", g.num_edges());
    for et in &g.edge_types {
        let child = &ds.schema.tables[et.child_table];
        let _ = writeln!(
            s,
            "  {}.{} -> {}: {}",
            child.name,
            child.columns[et.fk_column].name,
            ds.schema.tables[et.parent_table].name,
            et.parent_of.len()
        );
    }
    let _ = writeln!(s, "components: {}", comps.len());
    let _ = writeln!(
        s,
        "largest component: {} nodes ({:.1}%)",
        comps.largest(),
        100.0 * comps.largest_fraction()
    );
    s
}
