use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::{split_nodes, Denoiser, DenoiserModel, NodeSplit};
use crate::error::{Error, Result};
use crate::fkgraph::build_graph;
use crate::flowcore::{
    nll_loss, path_point, sample_noise, sample_path_point, velocity_loss, velocity_target, FlowConfig,
    VelocityMode,
};
use crate::gnn::GraphIndex;
use crate::neural::{lr_schedule, ParamStore, RAdam, Real, Tape, Tensor, Var};
use crate::preprocess::fit_encoders;
use crate::relschema::RelationalDataset;
use crate::rng;

/// Noise levels of the validation loss.
pub const VALIDATION_GRID: [f64; 10] = [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

/// Mean loss of one noise level over the rows selected per table. The target
/// `x1` is read only at those rows.
#[allow(clippy::too_many_arguments)]
pub fn loss_at<T: Real>(
    net: &Denoiser,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    graph: &GraphIndex,
    x_t: &[Tensor<T>],
    x0: &[Tensor<T>],
    x1: &[Tensor<T>],
    t: f64,
    flow: &FlowConfig,
    rows: &[&[usize]],
) -> Result<Var> {
    let vars: Vec<Var> = x_t.iter().map(|m| tape.input(m.clone())).collect();
    let heads = net.forward(tape, store, graph, &vars, t)?;
    let tables: Vec<usize> = (0..heads.len()).filter(|&k| net.layouts[k].width > 0).collect();
    match flow.velocity_mode {
        VelocityMode::VariationalMean => {
            let parts: Vec<_> = tables
                .iter()
                .map(|&k| (heads[k], &x1[k], &net.layouts[k], rows[k]))
                .collect();
            nll_loss(tape, &parts)
        }
        VelocityMode::Direct => {
            let targets: Vec<Tensor<T>> = tables
                .iter()
                .map(|&k| velocity_target(&x0[k], &x1[k], flow.sigma_min))
                .collect();
            let parts: Vec<_> = tables
                .iter()
                .zip(&targets)
                .map(|(&k, u)| (heads[k], u, rows[k]))
                .collect();
            velocity_loss(tape, &parts)
        }
    }
}

fn rows_of(splits: &[NodeSplit], val: bool) -> Vec<&[usize]> {
    splits
        .iter()
        .map(|s| if val { s.val.as_slice() } else { s.train.as_slice() })
        .collect()
}

/// Full-batch training. Each epoch visits `noise_levels` equally spaced
/// `t` in shuffled order with one optimizer step each, then scores the
/// validation rows on a fixed grid with fixed noise. Returns the parameters
/// of the best validation epoch.
pub fn train(ds: &RelationalDataset, cfg: &RunConfig, log: &mut dyn FnMut(&EpochStats)) -> Result<Checkpoint> {
    cfg.validate()?;
    ds.validate()?;
    let codecs = fit_encoders(ds)?;
    let mut x1 = Vec::with_capacity(codecs.len());
    for (codec, table) in codecs.iter().zip(&ds.tables) {
        x1.push(codec.encode(table)?.cast::<f32>());
    }
    if x1.iter().all(|m| m.cols() == 0 || m.rows() == 0) {
        return Err(Error::Config("dataset has no feature values to train on".into()));
    }
    let graph = GraphIndex::new(&build_graph(ds));
    let mut model = DenoiserModel::new(&ds.schema, codecs, cfg.clone())?;
    let tc = &cfg.train;
    let splits = split_nodes(&ds.row_counts(), tc.val_fraction, tc.seed);
    let train_rows = rows_of(&splits, false);
    let has_val = splits.iter().zip(&x1).any(|(s, m)| m.cols() > 0 && !s.val.is_empty());
    let val_rows = if has_val { rows_of(&splits, true) } else { train_rows.clone() };

    let mut val_rng = rng::stream(tc.seed, rng::VALIDATION);
    let val_noise: Vec<Vec<Tensor<f32>>> = VALIDATION_GRID.iter().map(|_| sample_noise(&x1, &mut val_rng)).collect();
    let mut noise_rng = rng::stream(tc.seed, rng::PATH_NOISE);
    let levels: Vec<f64> = (0..tc.noise_levels)
        .map(|i| i as f64 / (tc.noise_levels - 1) as f64)
        .collect();
    let total_steps = tc.epochs * tc.noise_levels;
    let optimizer = RAdam::default();

    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        let mut order = levels.clone();
        order.shuffle(&mut rng::substream(tc.seed, rng::SCHEDULE, epoch as u64));
        let mut sum = 0.0;
        for &t in &order {
            let (xt, x0) = sample_path_point(&x1, t, cfg.flow.sigma_min, &mut noise_rng)?;
            let mut tape = Tape::new();
            let loss = loss_at(
                &model.net, &mut tape, &model.store, &graph, &xt, &x0, &x1, t, &cfg.flow, &train_rows,
            )
            .map_err(|e| with_context(e, epoch, t))?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}, t = {t:.4}")));
            }
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            if !model.store.grads_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, t = {t:.4}")));
            }
            optimizer.step(&mut model.store, lr_schedule(step, total_steps));
            step += 1;
            sum += value;
        }
        let val = validation_loss(&model, &graph, &x1, &val_noise, &val_rows)
            .map_err(|e| with_context(e, epoch, f64::NAN))?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let stats = EpochStats {
            epoch,
            train: sum / order.len() as f64,
            val,
        };
        log(&stats);
        history.push(stats);
        if best.as_ref().is_none_or(|(_, b, _)| val < *b) {
            best = Some((epoch, val, model.store.snapshot()));
        }
    }
    let (best_epoch, best_val, params) = best.expect("at least one epoch");
    model.store.restore(params)?;
    Ok(Checkpoint {
        model,
        history,
        best_epoch,
        best_val,
    })
}

fn with_context(e: Error, epoch: usize, t: f64) -> Error {
    match e {
        Error::Numeric(m) if t.is_nan() => Error::Numeric(format!("{m} (validation after epoch {epoch})")),
        Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch}, t = {t:.4})")),
        other => other,
    }
}

fn validation_loss(
    model: &DenoiserModel,
    graph: &GraphIndex,
    x1: &[Tensor<f32>],
    noise: &[Vec<Tensor<f32>>],
    rows: &[&[usize]],
) -> Result<f64> {
    let mut total = 0.0;
    for (&t, x0) in VALIDATION_GRID.iter().zip(noise) {
        let xt: Vec<Tensor<f32>> = x0
            .iter()
            .zip(x1)
            .map(|(z, x)| path_point(z, x, t, model.config.flow.sigma_min))
            .collect();
        let mut tape = Tape::new();
        let loss = loss_at(
            &model.net, &mut tape, &model.store, graph, &xt, x0, x1, t, &model.config.flow, rows,
        )?;
        total += tape.value(loss).data()[0] as f64;
    }
    Ok(total / VALIDATION_GRID.len() as f64)
}
