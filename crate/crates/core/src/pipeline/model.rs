use rand::seq::SliceRandom;
use rand::Rng;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::flowcore::{expected_endpoint, VelocityMode};
use crate::gnn::{GraphIndex, HeteroGnn};
use crate::neural::{time_embedding, Mlp, MlpSpec, ParamStore, Real, Tape, Tensor, Var};
use crate::preprocess::{TableCodec, TableLayout};
use crate::relschema::RelationalSchema;
use crate::rng;

/// GNN embedder plus one MLP per table with feature columns. Parameters live
/// in a separate [`ParamStore`] so the same structure runs in `f32` and `f64`.
pub struct Denoiser {
    pub gnn: HeteroGnn,
    pub mlps: Vec<Option<Mlp>>,
    pub layouts: Vec<TableLayout>,
    pub time_dim: usize,
    pub time_scale: f64,
}

impl Denoiser {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        layouts: &[TableLayout],
        edge_tables: &[(usize, usize)],
        cfg: &RunConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let widths: Vec<usize> = layouts.iter().map(|l| l.width).collect();
        let gnn = HeteroGnn::new(store, cfg.gnn.clone(), &widths, edge_tables, rng)?;
        let e = gnn.embedding_dim();
        let mut mlps = Vec::with_capacity(layouts.len());
        for (k, layout) in layouts.iter().enumerate() {
            if layout.width == 0 {
                mlps.push(None);
                continue;
            }
            let spec = MlpSpec {
                input: layout.width + cfg.train.time_dim + e,
                hidden: cfg.mlp.hidden.clone(),
                heads: layout.head_widths(),
            };
            mlps.push(Some(Mlp::new(store, &format!("mlp{k}"), spec, rng)?));
        }
        Ok(Denoiser {
            gnn,
            mlps,
            layouts: layouts.to_vec(),
            time_dim: cfg.train.time_dim,
            time_scale: cfg.train.time_scale,
        })
    }

    /// Raw head outputs per table (logits for one-hot blocks, means for
    /// scalar slots); tables without features yield a zero-width input.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        graph: &GraphIndex,
        x: &[Var],
        t: f64,
    ) -> Result<Vec<Var>> {
        if x.len() != self.layouts.len() {
            return Err(Error::Shape(format!(
                "{} state tables for {} layouts",
                x.len(),
                self.layouts.len()
            )));
        }
        for (k, (&v, layout)) in x.iter().zip(&self.layouts).enumerate() {
            let shape = tape.value(v).shape();
            if shape != (graph.node_counts[k], layout.width) {
                return Err(Error::Shape(format!(
                    "table {k}: state {shape:?}, expected ({}, {})",
                    graph.node_counts[k], layout.width
                )));
            }
        }
        let emb = self.gnn.embed(tape, store, graph, x)?;
        let temb: Vec<T> = time_embedding(t, self.time_dim, self.time_scale)?
            .into_iter()
            .map(T::from_f64)
            .collect();
        let mut out = Vec::with_capacity(x.len());
        for (k, mlp) in self.mlps.iter().enumerate() {
            let Some(mlp) = mlp else {
                out.push(x[k]);
                continue;
            };
            let n = graph.node_counts[k];
            let time = tape.input(Tensor::from_fn(n, self.time_dim, |_, c| temb[c]));
            let mut parts = vec![x[k], time];
            if self.gnn.embedding_dim() > 0 {
                parts.push(emb[k]);
            }
            let input = tape.concat_cols(&parts)?;
            out.push(mlp.forward(tape, store, input)?);
        }
        Ok(out)
    }
}

/// A trained (or freshly initialized) model together with everything needed
/// to encode, decode and rebuild it.
pub struct DenoiserModel {
    pub config: RunConfig,
    pub schema: RelationalSchema,
    pub codecs: Vec<TableCodec>,
    pub net: Denoiser,
    pub store: ParamStore<f32>,
}

impl DenoiserModel {
    pub fn new(schema: &RelationalSchema, codecs: Vec<TableCodec>, config: RunConfig) -> Result<Self> {
        if codecs.len() != schema.tables.len() {
            return Err(Error::Shape(format!(
                "{} codecs for {} tables",
                codecs.len(),
                schema.tables.len()
            )));
        }
        let layouts: Vec<TableLayout> = codecs.iter().map(|c| c.layout.clone()).collect();
        let edge_tables: Vec<(usize, usize)> = schema
            .foreign_keys()
            .iter()
            .map(|fk| (fk.child_table, fk.parent_table))
            .collect();
        let mut store = ParamStore::new();
        let mut init = rng::stream(config.train.seed, rng::INIT);
        let net = Denoiser::new(&mut store, &layouts, &edge_tables, &config, &mut init)?;
        Ok(DenoiserModel {
            config,
            schema: schema.clone(),
            codecs,
            net,
            store,
        })
    }

    pub fn layouts(&self) -> &[TableLayout] {
        &self.net.layouts
    }

    /// Raw head outputs for the state `x_t`.
    pub fn head_outputs(&self, graph: &GraphIndex, x_t: &[Tensor<f32>], t: f64) -> Result<Vec<Tensor<f32>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = x_t.iter().map(|m| tape.input(m.clone())).collect();
        let out = self.net.forward(&mut tape, &self.store, graph, &vars, t)?;
        Ok(out.into_iter().map(|v| tape.take_value(v)).collect())
    }

    /// Per-component predictions: probability vectors for categorical blocks
    /// and means for scalar slots (raw velocities in direct mode).
    pub fn denoise(&self, graph: &GraphIndex, x_t: &[Tensor<f32>], t: f64) -> Result<Vec<Tensor<f32>>> {
        let raw = self.head_outputs(graph, x_t, t)?;
        Ok(match self.config.flow.velocity_mode {
            VelocityMode::Direct => raw,
            VelocityMode::VariationalMean => raw
                .iter()
                .zip(self.layouts())
                .map(|(h, l)| expected_endpoint(h, l))
                .collect(),
        })
    }
}

/// Train and validation rows of one table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Random per-table node split with `floor(n * val_fraction)` validation
/// rows, at least one of each kind when `n >= 2`; a single row trains.
pub fn split_nodes(row_counts: &[usize], val_fraction: f64, seed: u64) -> Vec<NodeSplit> {
    row_counts
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let n_val = if n < 2 {
                0
            } else {
                ((n as f64 * val_fraction).floor() as usize).clamp(1, n - 1)
            };
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng::substream(seed, rng::SPLIT, k as u64));
            let mut val = rows[..n_val].to_vec();
            let mut train = rows[n_val..].to_vec();
            val.sort_unstable();
            train.sort_unstable();
            NodeSplit { train, val }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = split_nodes(&[100, 1, 2, 0, 10], 0.15, 3);
        assert_eq!(s[0].val.len(), 15);
        assert_eq!(s[0].train.len(), 85);
        assert_eq!(s[1], NodeSplit { train: vec![0], val: vec![] });
        assert_eq!((s[2].train.len(), s[2].val.len()), (1, 1));
        assert!(s[3].train.is_empty() && s[3].val.is_empty());
        assert_eq!(s[4].val.len(), 1);
        let mut all: Vec<usize> = s[0].train.iter().chain(&s[0].val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(split_nodes(&[50, 20], 0.2, 9), split_nodes(&[50, 20], 0.2, 9));
        assert_ne!(split_nodes(&[50], 0.2, 9), split_nodes(&[50], 0.2, 10));
    }
}
