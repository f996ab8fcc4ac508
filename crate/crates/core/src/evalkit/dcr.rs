//! Distance to closest record with a Gower-style mixed-type distance.

use rayon::prelude::*;
use serde::Serialize;

use super::frame::{Frame, FrameValues};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.02;
pub const MIN_HOLDOUT_ROWS: usize = 50;

/// Per-column scales for the distance, taken from reference frames.
#[derive(Clone, Debug)]
pub struct GowerSpace {
    /// `Some(range)` for numeric columns, `None` for categorical ones.
    ranges: Vec<Option<f64>>,
}

impl GowerSpace {
    /// Numeric ranges over the observed values of all `frames`.
    pub fn fit(frames: &[&Frame]) -> Result<GowerSpace> {
        let first = frames.first().ok_or_else(|| Error::Eval("no reference frames".into()))?;
        for f in frames {
            check_columns(first, f)?;
        }
        let ranges = first
            .columns
            .iter()
            .enumerate()
            .map(|(c, col)| match col.values {
                FrameValues::Numeric(_) => {
                    let (lo, hi) = frames
                        .iter()
                        .flat_map(|f| match &f.columns[c].values {
                            FrameValues::Numeric(v) => v.iter().flatten().copied(),
                            FrameValues::Categorical(_) => unreachable!("checked"),
                        })
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
                    Some(if hi > lo { hi - lo } else { 0.0 })
                }
                FrameValues::Categorical(_) => None,
            })
            .collect();
        Ok(GowerSpace { ranges })
    }

    /// Mean per-column distance between row `i` of `a` and row `j` of `b`.
    pub fn distance(&self, a: &Frame, i: usize, b: &Frame, j: usize) -> f64 {
        let total: f64 = self
            .ranges
            .iter()
            .zip(a.columns.iter().zip(&b.columns))
            .map(|(range, (ca, cb))| match (&ca.values, &cb.values) {
                (FrameValues::Numeric(va), FrameValues::Numeric(vb)) => match (va[i], vb[j]) {
                    (None, None) => 0.0,
                    (Some(x), Some(y)) => {
                        let r = range.unwrap_or(0.0);
                        if x == y {
                            0.0
                        } else if r > 0.0 {
                            ((x - y).abs() / r).min(1.0)
                        } else {
                            1.0
                        }
                    }
                    _ => 1.0,
                },
                (FrameValues::Categorical(va), FrameValues::Categorical(vb)) => f64::from(u8::from(va[i] != vb[j])),
                _ => 1.0,
            })
            .sum();
        if self.ranges.is_empty() {
            0.0
        } else {
            total / self.ranges.len() as f64
        }
    }
}

fn check_columns(a: &Frame, b: &Frame) -> Result<()> {
    let same = a.columns.len() == b.columns.len()
        && a.columns.iter().zip(&b.columns).all(|(x, y)| {
            x.name == y.name
                && matches!(
                    (&x.values, &y.values),
                    (FrameValues::Numeric(_), FrameValues::Numeric(_)) | (FrameValues::Categorical(_), FrameValues::Categorical(_))
                )
        });
    if same {
        Ok(())
    } else {
        Err(Error::Schema(format!("frames for `{}` and `{}` have different columns", a.table, b.table)))
    }
}

/// Distance from every row of `query` to its nearest row in `reference`.
pub fn dcr(space: &GowerSpace, query: &Frame, reference: &Frame) -> Result<Vec<f64>> {
    check_columns(query, reference)?;
    if reference.n_rows == 0 {
        return Err(Error::Eval(format!("empty reference set for `{}`", reference.table)));
    }
    Ok((0..query.n_rows)
        .into_par_iter()
        .map(|i| {
            (0..reference.n_rows)
                .map(|j| space.distance(query, i, reference, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Linearly interpolated `q`-quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `(p - alpha) / (1 - alpha)`: 0 when synthetic rows sit as close to the
/// training data as fresh real rows, 1 when all of them are closer.
pub fn privacy_score(p: f64, alpha: f64) -> f64 {
    (p - alpha) / (1.0 - alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrivacyRow {
    pub table: String,
    pub n_train: usize,
    pub n_holdout: usize,
    pub n_synth: usize,
    /// `alpha`-quantile of holdout-to-train distances.
    pub threshold: f64,
    /// Fraction of synthetic rows at or below the threshold.
    pub p_below: f64,
    pub score: f64,
    pub small_holdout: bool,
}

pub fn dcr_privacy(train: &Frame, holdout: &Frame, synth: &Frame, alpha: f64) -> Result<PrivacyRow> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if holdout.n_rows == 0 || synth.n_rows == 0 {
        return Err(Error::Eval(format!("table `{}` has an empty holdout or synthetic set", train.table)));
    }
    let space = GowerSpace::fit(&[train, holdout])?;
    let threshold = quantile(&dcr(&space, holdout, train)?, alpha);
    let synth_dcr = dcr(&space, synth, train)?;
    let p_below = synth_dcr.iter().filter(|&&d| d <= threshold).count() as f64 / synth_dcr.len() as f64;
    Ok(PrivacyRow {
        table: train.table.clone(),
        n_train: train.n_rows,
        n_holdout: holdout.n_rows,
        n_synth: synth.n_rows,
        threshold,
        p_below,
        score: privacy_score(p_below, alpha),
        small_holdout: holdout.n_rows < MIN_HOLDOUT_ROWS,
    })
}
