//! Heterogeneous node embedder over the foreign-key graph.
//!
//! Every foreign-key edge type is used in both directions (child to parent
//! and parent to child), each direction with its own layer instance; the
//! outputs of all directions that end in a table are summed. Two backbones
//! are available: GATv2 (two attention blocks with linear residuals) and GIN
//! (per-table projection into a shared latent width followed by GIN layers).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fkgraph::HeteroGraph;
use crate::neural::{init_linear, Linear, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const ATTENTION_SLOPE: f64 = 0.2;
pub const MAX_EMBEDDING_DIM: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Gatv2,
    Gin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeteroConvSpec {
    pub backbone: Backbone,
    /// Hidden width of GATv2 block 1 and of the GIN layer MLPs.
    pub hidden: usize,
    /// Shared latent width of the GIN backbone.
    pub gin_latent: usize,
    pub gin_layers: usize,
    /// Output width `E`; `0` disables the embedder.
    pub embedding_dim: usize,
    /// Width of the learned input of tables without feature columns.
    pub constant_width: usize,
}

impl Default for HeteroConvSpec {
    fn default() -> Self {
        HeteroConvSpec {
            backbone: Backbone::Gatv2,
            hidden: 100,
            gin_latent: 20,
            gin_layers: 3,
            embedding_dim: 8,
            constant_width: 4,
        }
    }
}

impl HeteroConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim > MAX_EMBEDDING_DIM {
            return Err(Error::Config(format!(
                "gnn.embedding_dim must be <= {MAX_EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if self.hidden == 0 || self.gin_latent == 0 || self.constant_width == 0 {
            return Err(Error::Config("gnn widths must be >= 1".into()));
        }
        if !(1..=3).contains(&self.gin_layers) {
            return Err(Error::Config(format!(
                "gnn.gin_layers must be between 1 and 3, got {}",
                self.gin_layers
            )));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.embedding_dim > 0
    }
}

/// One direction of one edge type, with per-edge source and destination rows.
#[derive(Clone, Debug)]
pub struct Direction {
    pub edge_type: usize,
    pub upward: bool,
    pub src_table: usize,
    pub dst_table: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

/// Edge index arrays of a graph, built once per topology.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub node_counts: Vec<usize>,
    pub directions: Vec<Direction>,
}

impl GraphIndex {
    pub fn new(g: &HeteroGraph) -> Self {
        let mut directions = Vec::with_capacity(2 * g.edge_types.len());
        for (r, et) in g.edge_types.iter().enumerate() {
            let children: Arc<[usize]> = (0..et.parent_of.len()).collect();
            let parents: Arc<[usize]> = et.parent_of.clone().into();
            directions.push(Direction {
                edge_type: r,
                upward: true,
                src_table: et.child_table,
                dst_table: et.parent_table,
                src: children.clone(),
                dst: parents.clone(),
            });
            directions.push(Direction {
                edge_type: r,
                upward: false,
                src_table: et.parent_table,
                dst_table: et.child_table,
                src: parents,
                dst: children,
            });
        }
        GraphIndex {
            node_counts: g.node_counts.clone(),
            directions,
        }
    }
}

fn direction_name(edge_type: usize, upward: bool) -> String {
    format!("e{edge_type}.{}", if upward { "up" } else { "down" })
}

/// Single-head GATv2 convolution from a source table into a destination
/// table. Attention uses `W_s` on the destination row and `W_n` on the
/// neighbor; messages are `W_n h_j`.
#[derive(Clone, Copy, Debug)]
pub struct GatLayer {
    pub w_self: ParamId,
    pub w_neighbor: ParamId,
    pub attention: ParamId,
}

impl GatLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        src_width: usize,
        dst_width: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_self = store.add(format!("{name}.w_self"), init_linear::<T>(dst_width, out, rng).0);
        let w_neighbor = store.add(format!("{name}.w_neighbor"), init_linear::<T>(src_width, out, rng).0);
        let attention = store.add(format!("{name}.attention"), init_linear::<T>(out, 1, rng).0);
        GatLayer {
            w_self,
            w_neighbor,
            attention,
        }
    }

    /// Messages summed per destination row; destinations without edges get
    /// zero. Also returns the attention coefficient of every edge.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        dir: &Direction,
        h_src: Var,
        h_dst: Var,
        n_dst: usize,
    ) -> Result<(Var, Var)> {
        let ws = tape.param(store, self.w_self);
        let wn = tape.param(store, self.w_neighbor);
        let att = tape.param(store, self.attention);
        let s = tape.matmul(h_dst, ws)?;
        let n = tape.matmul(h_src, wn)?;
        let s_e = tape.gather_rows(s, dir.dst.clone());
        let n_e = tape.gather_rows(n, dir.src.clone());
        let z = tape.add(s_e, n_e)?;
        let z = tape.leaky_relu(z, ATTENTION_SLOPE);
        let scores = tape.matmul(z, att)?;
        let alpha = tape.segment_softmax(scores, dir.dst.clone(), n_dst)?;
        let weighted = tape.mul_column(n_e, alpha)?;
        let out = tape.scatter_add_rows(weighted, dir.dst.clone(), n_dst)?;
        Ok((out, alpha))
    }
}

/// GIN layer with `eps = 0`: `MLP(h_i + sum_j h_j)`.
#[derive(Clone, Copy, Debug)]
struct GinLayer {
    first: Linear,
    second: Linear,
}

impl GinLayer {
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        dir: &Direction,
        h_src: Var,
        h_dst: Var,
        n_dst: usize,
    ) -> Result<Var> {
        let msgs = tape.gather_rows(h_src, dir.src.clone());
        let agg = tape.scatter_add_rows(msgs, dir.dst.clone(), n_dst)?;
        let z = tape.add(h_dst, agg)?;
        let z = self.first.forward(tape, store, z)?;
        let z = tape.relu(z);
        self.second.forward(tape, store, z)
    }
}

enum Layers {
    Disabled,
    Gat {
        block1: Vec<GatLayer>,
        residual1: Vec<Linear>,
        block2: Vec<GatLayer>,
        residual2: Linear,
    },
    Gin {
        projection: Vec<Linear>,
        layers: Vec<Vec<GinLayer>>,
    },
}

pub struct HeteroGnn {
    pub spec: HeteroConvSpec,
    /// `(child table, parent table)` of every edge type.
    edge_tables: Vec<(usize, usize)>,
    feature_widths: Vec<usize>,
    constants: Vec<Option<ParamId>>,
    layers: Layers,
}

impl HeteroGnn {
    /// `feature_widths[k]` is the encoded width of table `k` (0 for tables
    /// without feature columns).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        spec: HeteroConvSpec,
        feature_widths: &[usize],
        edge_tables: &[(usize, usize)],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let n_tables = feature_widths.len();
        if let Some(&(c, p)) = edge_tables.iter().find(|(c, p)| *c >= n_tables || *p >= n_tables) {
            return Err(Error::Shape(format!("edge type ({c}, {p}) refers to a missing table")));
        }
        let mut constants = vec![None; n_tables];
        let mut widths = feature_widths.to_vec();
        if spec.enabled() {
            for k in 0..n_tables {
                if feature_widths[k] == 0 {
                    let c = Tensor::from_fn(1, spec.constant_width, |_, _| T::from_f64(rng.random_range(-1.0..1.0)));
                    constants[k] = Some(store.add(format!("gnn.const{k}"), c));
                    widths[k] = spec.constant_width;
                }
            }
        }
        let dirs: Vec<(String, usize, usize)> = edge_tables
            .iter()
            .enumerate()
            .flat_map(|(r, &(c, p))| [(direction_name(r, true), c, p), (direction_name(r, false), p, c)])
            .collect();
        let e = spec.embedding_dim;
        let layers = if !spec.enabled() {
            Layers::Disabled
        } else {
            match spec.backbone {
                Backbone::Gatv2 => {
                    let h = spec.hidden;
                    let block1 = dirs
                        .iter()
                        .map(|(name, s, d)| GatLayer::new(store, &format!("gnn.{name}.gat1"), widths[*s], widths[*d], h, rng))
                        .collect();
                    let residual1 = (0..n_tables)
                        .map(|k| Linear::new(store, &format!("gnn.res{k}"), widths[k], h, true, rng))
                        .collect();
                    let block2 = dirs
                        .iter()
                        .map(|(name, _, _)| GatLayer::new(store, &format!("gnn.{name}.gat2"), h, h, e, rng))
                        .collect();
                    let residual2 = Linear::new(store, "gnn.res_out", h, e, true, rng);
                    Layers::Gat {
                        block1,
                        residual1,
                        block2,
                        residual2,
                    }
                }
                Backbone::Gin => {
                    let l = spec.gin_latent;
                    let projection = (0..n_tables)
                        .map(|k| Linear::new(store, &format!("gnn.proj{k}"), widths[k], l, true, rng))
                        .collect();
                    let layers = (0..spec.gin_layers)
                        .map(|i| {
                            let out = if i + 1 == spec.gin_layers { e } else { l };
                            dirs.iter()
                                .map(|(name, _, _)| GinLayer {
                                    first: Linear::new(store, &format!("gnn.{name}.gin{i}.first"), l, spec.hidden, true, rng),
                                    second: Linear::new(store, &format!("gnn.{name}.gin{i}.second"), spec.hidden, out, true, rng),
                                })
                                .collect()
                        })
                        .collect();
                    Layers::Gin { projection, layers }
                }
            }
        };
        Ok(HeteroGnn {
            spec,
            edge_tables: edge_tables.to_vec(),
            feature_widths: feature_widths.to_vec(),
            constants,
            layers,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    fn check_graph(&self, g: &GraphIndex) -> Result<()> {
        let ok = g.node_counts.len() == self.feature_widths.len()
            && g.directions.len() == 2 * self.edge_tables.len()
            && g.directions.iter().all(|d| {
                let (c, p) = self.edge_tables[d.edge_type];
                if d.upward {
                    (d.src_table, d.dst_table) == (c, p)
                } else {
                    (d.src_table, d.dst_table) == (p, c)
                }
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("graph does not match the embedder's edge types".into()))
        }
    }

    /// Sum of per-direction outputs into each table, added to `base[k]`
    /// when given.
    fn sum_into(
        tape: &mut Tape<impl Real>,
        n_tables: usize,
        contributions: Vec<(usize, Var)>,
        base: Vec<Option<Var>>,
    ) -> Result<Vec<Option<Var>>> {
        let mut acc = base;
        debug_assert_eq!(acc.len(), n_tables);
        for (k, v) in contributions {
            acc[k] = Some(match acc[k] {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
        Ok(acc)
    }

    /// Per-table `N_k x E` embeddings of the current state `x` (one entry per
    /// table; the values of feature-less tables are ignored).
    pub fn embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g: &GraphIndex,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        let n_tables = self.feature_widths.len();
        if x.len() != n_tables {
            return Err(Error::Shape(format!("{} inputs for {n_tables} tables", x.len())));
        }
        self.check_graph(g)?;
        let e = self.spec.embedding_dim;
        if let Layers::Disabled = self.layers {
            return Ok(g
                .node_counts
                .iter()
                .map(|&n| tape.input(Tensor::zeros(n, e)))
                .collect());
        }
        let mut inputs = Vec::with_capacity(n_tables);
        for k in 0..n_tables {
            let n = g.node_counts[k];
            let v = match self.constants[k] {
                Some(c) => {
                    let c = tape.param(store, c);
                    tape.repeat_row(c, n)?
                }
                None => {
                    let shape = tape.value(x[k]).shape();
                    if shape != (n, self.feature_widths[k]) {
                        return Err(Error::Shape(format!(
                            "table {k}: input {shape:?}, expected ({n}, {})",
                            self.feature_widths[k]
                        )));
                    }
                    x[k]
                }
            };
            inputs.push(v);
        }
        let zeros = |tape: &mut Tape<T>, k: usize, w: usize| tape.input(Tensor::zeros(g.node_counts[k], w));
        match &self.layers {
            Layers::Disabled => unreachable!(),
            Layers::Gat {
                block1,
                residual1,
                block2,
                residual2,
            } => {
                let mut base = Vec::with_capacity(n_tables);
                for k in 0..n_tables {
                    base.push(Some(residual1[k].forward(tape, store, inputs[k])?));
                }
                let mut contrib = Vec::new();
                for (layer, dir) in block1.iter().zip(&g.directions) {
                    let n_dst = g.node_counts[dir.dst_table];
                    let (m, _) = layer.forward(tape, store, dir, inputs[dir.src_table], inputs[dir.dst_table], n_dst)?;
                    contrib.push((dir.dst_table, m));
                }
                let sums = Self::sum_into(tape, n_tables, contrib, base)?;
                let h: Vec<Var> = sums.into_iter().map(|v| tape.relu(v.expect("residual present"))).collect();

                let mut base = Vec::with_capacity(n_tables);
                for &hk in &h {
                    base.push(Some(residual2.forward(tape, store, hk)?));
                }
                let mut contrib = Vec::new();
                for (layer, dir) in block2.iter().zip(&g.directions) {
                    let n_dst = g.node_counts[dir.dst_table];
                    let (m, _) = layer.forward(tape, store, dir, h[dir.src_table], h[dir.dst_table], n_dst)?;
                    contrib.push((dir.dst_table, m));
                }
                let sums = Self::sum_into(tape, n_tables, contrib, base)?;
                Ok(sums.into_iter().map(|v| v.expect("residual present")).collect())
            }
            Layers::Gin { projection, layers } => {
                let mut h = Vec::with_capacity(n_tables);
                for k in 0..n_tables {
                    h.push(projection[k].forward(tape, store, inputs[k])?);
                }
                let last = layers.len() - 1;
                for (i, layer) in layers.iter().enumerate() {
                    let width = if i == last { e } else { self.spec.gin_latent };
                    let mut contrib = Vec::new();
                    for (gin, dir) in layer.iter().zip(&g.directions) {
                        let n_dst = g.node_counts[dir.dst_table];
                        let m = gin.forward(tape, store, dir, h[dir.src_table], h[dir.dst_table], n_dst)?;
                        contrib.push((dir.dst_table, m));
                    }
                    let sums = Self::sum_into(tape, n_tables, contrib, vec![None; n_tables])?;
                    let mut next = Vec::with_capacity(n_tables);
                    for (k, v) in sums.into_iter().enumerate() {
                        // tables outside every edge type receive nothing
                        let v = match v {
                            Some(v) => v,
                            None => zeros(tape, k, width),
                        };
                        next.push(if i == last { v } else { tape.relu(v) });
                    }
                    h = next;
                }
                Ok(h)
            }
        }
    }
}
