use super::model::DenoiserModel;
use crate::error::{Error, Result};
use crate::fkgraph::{build_graph, connected_components, resample_topology, HeteroGraph};
use crate::flowcore::{euler_integrate, marginal_velocity, sample_noise, VelocityMode};
use crate::gnn::GraphIndex;
use crate::neural::Tensor;
use crate::relschema::{ColumnData, ColumnKind, RelationalDataset, Table};
use crate::rng;

/// Sample a synthetic dataset: resample the real topology, integrate the
/// learned velocity from noise and decode every table.
pub fn generate(model: &DenoiserModel, real: &RelationalDataset, seed: u64) -> Result<RelationalDataset> {
    let expected = model.schema.structure_hash();
    if real.schema.structure_hash() != expected {
        return Err(Error::Schema(
            "dataset schema does not match the checkpoint's schema".into(),
        ));
    }
    let g = build_graph(real);
    let comps = connected_components(&g);
    let topology = resample_topology(&g, &comps, seed);
    generate_on(model, &topology.graph, seed)
}

/// Generate features for a given topology.
pub fn generate_on(model: &DenoiserModel, topology: &HeteroGraph, seed: u64) -> Result<RelationalDataset> {
    let layouts = model.layouts();
    if topology.node_counts.len() != layouts.len() {
        return Err(Error::Shape(format!(
            "topology has {} tables, model {}",
            topology.node_counts.len(),
            layouts.len()
        )));
    }
    let graph = GraphIndex::new(topology);
    let like: Vec<Tensor<f32>> = topology
        .node_counts
        .iter()
        .zip(layouts)
        .map(|(&n, l)| Tensor::zeros(n, l.width))
        .collect();
    let x0 = sample_noise(&like, &mut rng::stream(seed, rng::GENERATION));
    let flow = &model.config.flow;
    let x1 = euler_integrate(
        x0,
        |x, t| {
            let heads = model.head_outputs(&graph, x, t)?;
            x.iter()
                .zip(&heads)
                .zip(layouts)
                .map(|((xk, hk), l)| marginal_velocity(xk, hk, l, t, flow))
                .collect()
        },
        flow.euler_steps,
    )?;

    // Categorical cells follow the probability head at the final state.
    let probs = match flow.velocity_mode {
        VelocityMode::VariationalMean => Some(model.denoise(&graph, &x1, 1.0)?),
        VelocityMode::Direct => None,
    };
    let mut tables = Vec::with_capacity(layouts.len());
    for (k, spec) in model.schema.tables.iter().enumerate() {
        let mut m = x1[k].cast::<f64>();
        if let Some(p) = &probs {
            for b in &layouts[k].categorical {
                for r in 0..m.rows() {
                    m.row_mut(r)[b.offset..b.offset + b.width]
                        .iter_mut()
                        .zip(&p[k].row(r)[b.offset..b.offset + b.width])
                        .for_each(|(dst, &src)| *dst = src as f64);
                }
            }
        }
        if !m.is_finite() {
            return Err(Error::Numeric(format!("non-finite generated values in table `{}`", spec.name)));
        }
        let decoded = model.codecs[k].decode(&m, spec.columns.len())?;
        let mut columns = Vec::with_capacity(spec.columns.len());
        for (c, (col, cell)) in spec.columns.iter().zip(decoded).enumerate() {
            columns.push(match col.kind {
                ColumnKind::PrimaryKey => ColumnData::PrimaryKey,
                ColumnKind::ForeignKey => {
                    let et = topology
                        .edge_types
                        .iter()
                        .find(|e| e.child_table == k && e.fk_column == c)
                        .ok_or_else(|| Error::Shape(format!("no edges for `{}.{}`", spec.name, col.name)))?;
                    ColumnData::ForeignKey(et.parent_of.clone())
                }
                _ => cell.ok_or_else(|| Error::Shape(format!("column `{}.{}` was not decoded", spec.name, col.name)))?,
            });
        }
        tables.push(Table {
            n_rows: topology.node_counts[k],
            columns,
        });
    }
    let out = RelationalDataset {
        schema: model.schema.clone(),
        tables,
    };
    out.validate()?;
    Ok(out)
}
