//! Encoding of table cells into the continuous space the flow runs in.
//!
//! Per table, the encoded row is laid out as: one slot per continuous column
//! (quantile-transformed to a standard normal marginal), one slot per
//! missing-value indicator, then one one-hot block per categorical column.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::relschema::{ColumnData, ColumnKind, RelationalDataset, Table, TableSpec};

pub const MAX_QUANTILES: usize = 1000;
/// Ranks are clipped to `[RANK_EPS, 1 - RANK_EPS]` before the normal quantile.
pub const RANK_EPS: f64 = 1e-7;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Acklam's rational approximation of the standard normal quantile
/// (relative error below 1.15e-9 on (0, 1)).
pub fn normal_quantile_approx(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal quantile: [`normal_quantile_approx`] refined by one
/// Halley step against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let x = normal_quantile_approx(p);
    if !x.is_finite() {
        return x;
    }
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Empirical CDF of a column, represented by up to [`MAX_QUANTILES`]
/// reference quantiles at equally spaced levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    pub quantiles: Vec<f64>,
}

impl QuantileMap {
    pub fn fit(observed: &[f64]) -> Option<Self> {
        if observed.is_empty() {
            return None;
        }
        let mut sorted = observed.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let m = n.min(MAX_QUANTILES);
        if m == 1 {
            return Some(QuantileMap {
                quantiles: vec![sorted[0]],
            });
        }
        let quantiles = (0..m)
            .map(|i| {
                let pos = i as f64 / (m - 1) as f64 * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                sorted[lo] + frac * (sorted[hi] - sorted[lo])
            })
            .collect();
        Some(QuantileMap { quantiles })
    }

    fn level(&self, i: usize) -> f64 {
        i as f64 / (self.quantiles.len() - 1) as f64
    }

    /// Empirical CDF by linear interpolation; plateaus of tied quantiles map
    /// to the middle of their level range.
    pub fn rank(&self, v: f64) -> f64 {
        let q = &self.quantiles;
        let m = q.len();
        if m == 1 {
            return 0.5;
        }
        let lo = q.partition_point(|&x| x < v);
        let hi = q.partition_point(|&x| x <= v);
        if hi > lo {
            return 0.5 * (self.level(lo) + self.level(hi - 1));
        }
        if lo == 0 {
            return 0.0;
        }
        if lo == m {
            return 1.0;
        }
        let (x0, x1) = (q[lo - 1], q[lo]);
        let (r0, r1) = (self.level(lo - 1), self.level(lo));
        r0 + (v - x0) / (x1 - x0) * (r1 - r0)
    }

    /// Inverse of [`QuantileMap::rank`]; monotone in `p`.
    pub fn value(&self, p: f64) -> f64 {
        let q = &self.quantiles;
        let m = q.len();
        if m == 1 {
            return q[0];
        }
        let p = p.clamp(0.0, 1.0);
        let pos = p * (m - 1) as f64;
        let i = (pos.floor() as usize).min(m - 2);
        let frac = pos - i as f64;
        q[i] + frac * (q[i + 1] - q[i])
    }

    pub fn encode(&self, v: f64) -> f64 {
        normal_quantile(self.rank(v).clamp(RANK_EPS, 1.0 - RANK_EPS))
    }

    pub fn decode(&self, z: f64) -> f64 {
        self.value(normal_cdf(z))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    QuantileGauss(QuantileMap),
    MissingIndicator { fill_value: f64 },
    OneHot { category_count: usize, nan_category: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnEncoder {
    /// Index of the column in its table's schema.
    pub column: usize,
    #[serde(flatten)]
    pub kind: EncoderKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub column: usize,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub column: usize,
    pub offset: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLayout {
    pub width: usize,
    pub continuous: Vec<Slot>,
    pub indicators: Vec<Slot>,
    pub categorical: Vec<Block>,
}

impl TableLayout {
    /// Offsets of every scalar (Gaussian-head) slot: continuous then indicators.
    pub fn scalar_slots(&self) -> Vec<usize> {
        self.continuous
            .iter()
            .chain(&self.indicators)
            .map(|s| s.offset)
            .collect()
    }

    /// `(offset, width)` of every one-hot block.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        self.categorical.iter().map(|b| (b.offset, b.width)).collect()
    }

    pub fn head_widths(&self) -> Vec<usize> {
        let mut w = vec![1; self.continuous.len() + self.indicators.len()];
        w.extend(self.categorical.iter().map(|b| b.width));
        w
    }
}

/// Fitted encoders and layout for one table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCodec {
    pub encoders: Vec<ColumnEncoder>,
    pub layout: TableLayout,
}

pub fn fit_encoders(ds: &RelationalDataset) -> Result<Vec<TableCodec>> {
    ds.schema
        .tables
        .iter()
        .zip(&ds.tables)
        .map(|(spec, table)| TableCodec::fit(spec, table))
        .collect()
}

impl TableCodec {
    pub fn fit(spec: &TableSpec, table: &Table) -> Result<Self> {
        let mut encoders = Vec::new();
        let mut continuous = Vec::new();
        let mut indicators = Vec::new();
        let mut categorical = Vec::new();

        for (ci, (col, data)) in spec.columns.iter().zip(&table.columns).enumerate() {
            match (col.kind, data) {
                (ColumnKind::Continuous, ColumnData::Continuous(v)) => {
                    let observed: Vec<f64> = v.iter().flatten().copied().collect();
                    let map = QuantileMap::fit(&observed).ok_or_else(|| {
                        Error::Schema(format!(
                            "continuous column {}.{} has no observed values",
                            spec.name, col.name
                        ))
                    })?;
                    encoders.push(ColumnEncoder {
                        column: ci,
                        kind: EncoderKind::QuantileGauss(map),
                    });
                    continuous.push(ci);
                    if observed.len() < v.len() {
                        let fill_value = observed.iter().sum::<f64>() / observed.len() as f64;
                        encoders.push(ColumnEncoder {
                            column: ci,
                            kind: EncoderKind::MissingIndicator { fill_value },
                        });
                        indicators.push(ci);
                    }
                }
                (ColumnKind::Categorical, ColumnData::Categorical(v)) => {
                    let nan_category = v.iter().any(Option::is_none);
                    let category_count = col.categories.len();
                    if category_count == 0 && !nan_category {
                        return Err(Error::Schema(format!(
                            "categorical column {}.{} has no observed values",
                            spec.name, col.name
                        )));
                    }
                    encoders.push(ColumnEncoder {
                        column: ci,
                        kind: EncoderKind::OneHot {
                            category_count,
                            nan_category,
                        },
                    });
                    categorical.push((ci, category_count + nan_category as usize));
                }
                _ => {}
            }
        }

        let mut offset = 0;
        let mut slots = |cols: Vec<usize>| -> Vec<Slot> {
            cols.into_iter()
                .map(|column| {
                    let s = Slot { column, offset };
                    offset += 1;
                    s
                })
                .collect()
        };
        let continuous = slots(continuous);
        let indicators = slots(indicators);
        let categorical = categorical
            .into_iter()
            .map(|(column, width)| {
                let b = Block {
                    column,
                    offset,
                    width,
                };
                offset += width;
                b
            })
            .collect();
        Ok(TableCodec {
            encoders,
            layout: TableLayout {
                width: offset,
                continuous,
                indicators,
                categorical,
            },
        })
    }

    fn quantile_map(&self, column: usize) -> &QuantileMap {
        self.encoders
            .iter()
            .find_map(|e| match &e.kind {
                EncoderKind::QuantileGauss(m) if e.column == column => Some(m),
                _ => None,
            })
            .expect("layout slot without encoder")
    }

    fn fill_value(&self, column: usize) -> Option<f64> {
        self.encoders.iter().find_map(|e| match e.kind {
            EncoderKind::MissingIndicator { fill_value } if e.column == column => Some(fill_value),
            _ => None,
        })
    }

    fn one_hot(&self, column: usize) -> (usize, bool) {
        self.encoders
            .iter()
            .find_map(|e| match e.kind {
                EncoderKind::OneHot {
                    category_count,
                    nan_category,
                } if e.column == column => Some((category_count, nan_category)),
                _ => None,
            })
            .expect("layout block without encoder")
    }

    /// Encode every row of `table` into an `n_rows x width` matrix.
    pub fn encode(&self, table: &Table) -> Result<Tensor<f64>> {
        let n = table.n_rows;
        let mut out = Tensor::zeros(n, self.layout.width);
        for slot in &self.layout.continuous {
            let ColumnData::Continuous(v) = &table.columns[slot.column] else {
                return Err(Error::Shape(format!("column {} is not continuous", slot.column)));
            };
            let map = self.quantile_map(slot.column);
            let fill = self.fill_value(slot.column);
            for (r, cell) in v.iter().enumerate() {
                let x = match (cell, fill) {
                    (Some(x), _) => *x,
                    (None, Some(f)) => f,
                    (None, None) => {
                        return Err(Error::Schema(format!(
                            "missing value in column {} which had none at fit time",
                            slot.column
                        )))
                    }
                };
                out.set(r, slot.offset, map.encode(x));
            }
        }
        for slot in &self.layout.indicators {
            let ColumnData::Continuous(v) = &table.columns[slot.column] else {
                return Err(Error::Shape(format!("column {} is not continuous", slot.column)));
            };
            for (r, cell) in v.iter().enumerate() {
                out.set(r, slot.offset, if cell.is_none() { 1.0 } else { 0.0 });
            }
        }
        for block in &self.layout.categorical {
            let ColumnData::Categorical(v) = &table.columns[block.column] else {
                return Err(Error::Shape(format!("column {} is not categorical", block.column)));
            };
            let (count, nan) = self.one_hot(block.column);
            for (r, cell) in v.iter().enumerate() {
                let idx = match cell {
                    Some(c) if (*c as usize) < count => *c as usize,
                    None if nan => count,
                    other => {
                        return Err(Error::Schema(format!(
                            "category index {other:?} out of range for column {} ({count} categories)",
                            block.column
                        )))
                    }
                };
                out.set(r, block.offset + idx, 1.0);
            }
        }
        Ok(out)
    }

    /// Decode an encoded matrix into feature columns, indexed by schema
    /// column (key columns are `None` and left to the caller).
    pub fn decode(&self, m: &Tensor<f64>, n_columns: usize) -> Result<Vec<Option<ColumnData>>> {
        if m.cols() != self.layout.width {
            return Err(Error::Shape(format!(
                "decode of width {} with layout width {}",
                m.cols(),
                self.layout.width
            )));
        }
        let n = m.rows();
        let mut out: Vec<Option<ColumnData>> = vec![None; n_columns];
        for slot in &self.layout.continuous {
            let map = self.quantile_map(slot.column);
            let v = (0..n).map(|r| Some(map.decode(m.get(r, slot.offset)))).collect();
            out[slot.column] = Some(ColumnData::Continuous(v));
        }
        for slot in &self.layout.indicators {
            if let Some(ColumnData::Continuous(v)) = &mut out[slot.column] {
                for (r, cell) in v.iter_mut().enumerate() {
                    if m.get(r, slot.offset) > 0.5 {
                        *cell = None;
                    }
                }
            }
        }
        for block in &self.layout.categorical {
            let (count, _) = self.one_hot(block.column);
            let v = (0..n)
                .map(|r| {
                    let row = &m.row(r)[block.offset..block.offset + block.width];
                    let c = crate::neural::argmax(row);
                    (c < count).then_some(c as u32)
                })
                .collect();
            out[block.column] = Some(ColumnData::Categorical(v));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cont(v: &[Option<f64>]) -> Table {
        Table {
            n_rows: v.len(),
            columns: vec![ColumnData::Continuous(v.to_vec())],
        }
    }

    fn spec(kind: ColumnKind, categories: &[&str]) -> TableSpec {
        TableSpec {
            name: "t".into(),
            columns: vec![crate::relschema::ColumnSpec {
                name: "c".into(),
                kind,
                target_table: None,
                categories: categories.iter().map(|s| s.to_string()).collect(),
            }],
        }
    }

    /// Phi by composite Simpson quadrature of the normal density; negative
    /// arguments integrate the lower tail directly to avoid cancellation.
    fn cdf_oracle(z: f64) -> f64 {
        let pdf = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let simpson = |a: f64, b: f64| {
            let n = 40_000;
            let h = (b - a) / n as f64;
            let mut s = pdf(a) + pdf(b);
            for i in 1..n {
                s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        if z < 0.0 {
            simpson(-14.0, z)
        } else {
            0.5 + simpson(0.0, z)
        }
    }

    fn quantile_oracle(p: f64) -> f64 {
        let (mut lo, mut hi) = (-8.0f64, 8.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cdf_oracle(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_function_against_bisection_oracle() {
        for &p in &[1e-6, 0.001, 0.02, 0.1, 0.3, 0.5, 0.7, 0.8413, 0.97, 0.999] {
            let want = quantile_oracle(p);
            assert!((normal_quantile_approx(p) - want).abs() <= 1.15e-9 * want.abs().max(1.0), "p={p}");
            assert!((normal_quantile(p) - want).abs() < 1e-10, "p={p}");
        }
    }

    #[test]
    fn median_maps_to_zero() {
        let v: Vec<Option<f64>> = (1..=9).map(|x| Some(x as f64)).collect();
        let codec = TableCodec::fit(&spec(ColumnKind::Continuous, &[]), &cont(&v)).unwrap();
        let m = codec.encode(&cont(&[Some(5.0)])).unwrap();
        assert!(m.get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn rank_0_8413_of_uniform_grid() {
        // Values 1..=1000: reference quantiles are the values themselves, so
        // the empirical rank of v is (v - 1) / 999.
        let values: Vec<f64> = (1..=1000).map(|x| x as f64).collect();
        let map = QuantileMap::fit(&values).unwrap();
        let v = 1.0 + 0.8413 * 999.0;
        let oracle_rank = (v - 1.0) / 999.0;
        let want = quantile_oracle(oracle_rank);
        let got = map.encode(v);
        assert!((got - want).abs() < 1e-8);
        assert!((got - 1.0).abs() < 1e-2);
    }

    #[test]
    fn missing_continuous_gets_indicator_and_mean_fill() {
        let t = cont(&[Some(1.0), None, Some(3.0)]);
        let codec = TableCodec::fit(&spec(ColumnKind::Continuous, &[]), &t).unwrap();
        assert_eq!(codec.layout.width, 2);
        assert_eq!(codec.layout.indicators, vec![Slot { column: 0, offset: 1 }]);
        assert_eq!(
            codec.encoders[1].kind,
            EncoderKind::MissingIndicator { fill_value: 2.0 }
        );
        let m = codec.encode(&t).unwrap();
        assert_eq!(m.get(1, 1), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
        // fill value 2.0 is the median of {1, 3}
        assert!(m.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn all_observed_has_no_indicator() {
        let t = cont(&[Some(1.0), Some(2.0)]);
        let codec = TableCodec::fit(&spec(ColumnKind::Continuous, &[]), &t).unwrap();
        assert!(codec.layout.indicators.is_empty());
        assert_eq!(codec.layout.width, 1);
    }

    #[test]
    fn no_observed_values_is_an_error() {
        let t = cont(&[None, None]);
        assert!(TableCodec::fit(&spec(ColumnKind::Continuous, &[]), &t).is_err());
    }

    #[test]
    fn nan_category() {
        let t = Table {
            n_rows: 3,
            columns: vec![ColumnData::Categorical(vec![Some(0), None, Some(0)])],
        };
        let codec = TableCodec::fit(&spec(ColumnKind::Categorical, &["a"]), &t).unwrap();
        assert_eq!(codec.layout.width, 2);
        let m = codec.encode(&t).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 1.0]);
        let back = codec.decode(&m, 1).unwrap();
        assert_eq!(back[0], Some(t.columns[0].clone()));
    }

    #[test]
    fn one_hot_and_range_error() {
        let t = Table {
            n_rows: 1,
            columns: vec![ColumnData::Categorical(vec![Some(2)])],
        };
        let codec = TableCodec::fit(&spec(ColumnKind::Categorical, &["a", "b", "c", "d"]), &t).unwrap();
        assert_eq!(codec.encode(&t).unwrap().row(0), &[0.0, 0.0, 1.0, 0.0]);
        let bad = Table {
            n_rows: 1,
            columns: vec![ColumnData::Categorical(vec![Some(4)])],
        };
        assert!(codec.encode(&bad).is_err());
    }

    #[test]
    fn indicator_threshold_overrides_value() {
        let t = cont(&[Some(1.0), None, Some(3.0)]);
        let codec = TableCodec::fit(&spec(ColumnKind::Continuous, &[]), &t).unwrap();
        let m = Tensor::from_vec(1, 2, vec![0.3, 0.9]).unwrap();
        assert_eq!(
            codec.decode(&m, 1).unwrap()[0],
            Some(ColumnData::Continuous(vec![None]))
        );
    }

    #[test]
    fn tied_values_are_stable() {
        let t = cont(&[Some(1.0), Some(1.0), Some(1.0), Some(2.0)]);
        let codec = TableCodec::fit(&spec(ColumnKind::Continuous, &[]), &t).unwrap();
        let m = codec.encode(&t).unwrap();
        let back = codec.decode(&m, 1).unwrap();
        let ColumnData::Continuous(v) = back[0].clone().unwrap() else { unreachable!() };
        for (a, b) in v.iter().zip([1.0, 1.0, 1.0, 2.0]) {
            assert!((a.unwrap() - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn continuous_round_trip(
            values in proptest::collection::vec(-1e3f64..1e3, 2..1500),
            probe in 0.0f64..1.0,
        ) {
            let map = QuantileMap::fit(&values).unwrap();
            let (lo, hi) = (map.quantiles[0], *map.quantiles.last().unwrap());
            prop_assume!(hi > lo);
            let v = lo + (hi - lo) * (0.001 + 0.998 * probe);
            let r = map.rank(v);
            prop_assume!(r > RANK_EPS && r < 1.0 - RANK_EPS);
            prop_assert!((map.decode(map.encode(v)) - v).abs() < 1e-6);
        }

        #[test]
        fn encode_is_monotone(values in proptest::collection::vec(-50f64..50.0, 1..300), a in -60f64..60.0, b in -60f64..60.0) {
            let map = QuantileMap::fit(&values).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(map.encode(lo) <= map.encode(hi));
        }

        #[test]
        fn one_hot_blocks_sum_to_one(cells in proptest::collection::vec(proptest::option::of(0u32..5), 1..100)) {
            let t = Table { n_rows: cells.len(), columns: vec![ColumnData::Categorical(cells.clone())] };
            let codec = TableCodec::fit(&spec(ColumnKind::Categorical, &["a", "b", "c", "d", "e"]), &t).unwrap();
            let m = codec.encode(&t).unwrap();
            for r in 0..m.rows() {
                prop_assert_eq!(m.row(r).iter().sum::<f64>(), 1.0);
            }
            prop_assert_eq!(codec.decode(&m, 1).unwrap()[0].clone(), Some(t.columns[0].clone()));
        }
    }
}
