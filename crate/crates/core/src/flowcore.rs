//! Optimal-transport conditional path, velocities, the training loss and
//! the Euler sampler.
//!
//! States are per-table matrices (`Vec<Tensor<T>>`) at a common time `t`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{softmax_rows_in_place, Real, Tape, Tensor, Var};
use crate::preprocess::TableLayout;

pub type EncodedState<T> = Vec<Tensor<T>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    #[default]
    VariationalMean,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub euler_steps: usize,
    pub velocity_mode: VelocityMode,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            sigma_min: 1e-3,
            euler_steps: 100,
            velocity_mode: VelocityMode::VariationalMean,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config(format!(
                "flow.sigma_min must lie in (0, 1), got {}",
                self.sigma_min
            )));
        }
        if self.euler_steps == 0 {
            return Err(Error::Config("flow.euler_steps must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Config(format!("time {t} outside [0, 1]")))
    }
}

/// `t * x1 + (1 - t + t * sigma_min) * x0`, elementwise.
pub fn path_point<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64, sigma_min: f64) -> Tensor<T> {
    let a = T::from_f64(t);
    let b = T::from_f64(1.0 - t + t * sigma_min);
    let mut out = x1.clone();
    for (o, &z) in out.data_mut().iter_mut().zip(x0.data()) {
        *o = a * *o + b * z;
    }
    out
}

/// Standard normal noise shaped like `like`, drawn table by table in
/// row-major order.
pub fn sample_noise<T: Real>(like: &[Tensor<T>], rng: &mut impl Rng) -> EncodedState<T> {
    like.iter()
        .map(|m| {
            Tensor::from_fn(m.rows(), m.cols(), |_, _| {
                T::from_f64(rng.sample::<f64, _>(StandardNormal))
            })
        })
        .collect()
}

/// Draw `x0` and return `(x_t, x0)`.
pub fn sample_path_point<T: Real>(
    x1: &[Tensor<T>],
    t: f64,
    sigma_min: f64,
    rng: &mut impl Rng,
) -> Result<(EncodedState<T>, EncodedState<T>)> {
    check_time(t)?;
    let x0 = sample_noise(x1, rng);
    let xt = x0
        .iter()
        .zip(x1)
        .map(|(z, x)| path_point(z, x, t, sigma_min))
        .collect();
    Ok((xt, x0))
}

fn denominator(t: f64, sigma_min: f64) -> Result<f64> {
    let d = 1.0 - (1.0 - sigma_min) * t;
    if d <= 0.0 {
        return Err(Error::Numeric(format!(
            "velocity undefined at t = {t} with sigma_min = {sigma_min}"
        )));
    }
    Ok(d)
}

pub fn conditional_velocity(x_t: f64, x1: f64, t: f64, sigma_min: f64) -> Result<f64> {
    Ok((x1 - (1.0 - sigma_min) * x_t) / denominator(t, sigma_min)?)
}

/// Expected endpoint `x̂1` from raw head outputs: softmax over every one-hot
/// block, scalar slots passed through as means.
pub fn expected_endpoint<T: Real>(head: &Tensor<T>, layout: &TableLayout) -> Tensor<T> {
    let mut out = head.clone();
    for b in &layout.categorical {
        softmax_rows_in_place(&mut out, b.offset, b.width);
    }
    out
}

pub fn marginal_velocity<T: Real>(
    x_t: &Tensor<T>,
    head: &Tensor<T>,
    layout: &TableLayout,
    t: f64,
    cfg: &FlowConfig,
) -> Result<Tensor<T>> {
    check_time(t)?;
    if x_t.shape() != head.shape() {
        return Err(Error::Shape(format!(
            "state {:?} vs head output {:?}",
            x_t.shape(),
            head.shape()
        )));
    }
    match cfg.velocity_mode {
        VelocityMode::Direct => Ok(head.clone()),
        VelocityMode::VariationalMean => {
            let inv = 1.0 / denominator(t, cfg.sigma_min)?;
            let keep = T::from_f64(1.0 - cfg.sigma_min);
            let inv = T::from_f64(inv);
            let mut v = expected_endpoint(head, layout);
            for (o, &x) in v.data_mut().iter_mut().zip(x_t.data()) {
                *o = (*o - keep * x) * inv;
            }
            Ok(v)
        }
    }
}

/// Mean negative log-likelihood over the masked rows of one or more tables,
/// recorded on the tape. Each entry is `(head output, target, layout, rows)`.
pub fn nll_loss<T: Real>(tape: &mut Tape<T>, parts: &[(Var, &Tensor<T>, &TableLayout, &[usize])]) -> Result<Var> {
    let mut terms = Vec::with_capacity(parts.len());
    let mut count = 0usize;
    for &(pred, target, layout, rows) in parts {
        let (v, n) = tape.nll(pred, target, &layout.scalar_slots(), &layout.blocks(), rows)?;
        terms.push(v);
        count += n;
    }
    if count == 0 {
        return Err(Error::Config("loss mask selects no terms".into()));
    }
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Half squared error between the head output and the conditional velocity
/// target, averaged over masked entries (used when heads emit velocities).
pub fn velocity_loss<T: Real>(tape: &mut Tape<T>, parts: &[(Var, &Tensor<T>, &[usize])]) -> Result<Var> {
    let mut terms = Vec::with_capacity(parts.len());
    let mut count = 0usize;
    for &(pred, target, rows) in parts {
        let cols: Vec<usize> = (0..target.cols()).collect();
        let (v, n) = tape.nll(pred, target, &cols, &[], rows)?;
        terms.push(v);
        count += n;
    }
    if count == 0 {
        return Err(Error::Config("loss mask selects no terms".into()));
    }
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Conditional velocity targets `x1 - (1 - sigma_min) x0`.
pub fn velocity_target<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, sigma_min: f64) -> Tensor<T> {
    let keep = T::from_f64(1.0 - sigma_min);
    let mut out = x1.clone();
    for (o, &z) in out.data_mut().iter_mut().zip(x0.data()) {
        *o -= keep * z;
    }
    out
}

/// Left-endpoint Euler: `x += v(x, j/steps) / steps` for `j = 0..steps`.
pub fn euler_integrate<T: Real>(
    x0: EncodedState<T>,
    mut velocity: impl FnMut(&[Tensor<T>], f64) -> Result<EncodedState<T>>,
    steps: usize,
) -> Result<EncodedState<T>> {
    if steps == 0 {
        return Err(Error::Config("euler_steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let h = T::from_f64(dt);
    let mut x = x0;
    for j in 0..steps {
        let t = j as f64 * dt;
        let v = velocity(&x, t)?;
        if v.len() != x.len() {
            return Err(Error::Shape(format!("velocity has {} tables, state {}", v.len(), x.len())));
        }
        for (k, (xk, vk)) in x.iter_mut().zip(&v).enumerate() {
            if xk.shape() != vk.shape() {
                return Err(Error::Shape(format!(
                    "table {k}: velocity {:?} vs state {:?}",
                    vk.shape(),
                    xk.shape()
                )));
            }
            if !vk.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite velocity in table {k} at step {j} (t = {t:.4})"
                )));
            }
            for (a, &b) in xk.data_mut().iter_mut().zip(vk.data()) {
                *a += h * b;
            }
        }
    }
    Ok(x)
}
