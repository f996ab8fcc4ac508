//! Synthetic two-table dataset with a known parent/child dependency.
//!
//! Parents carry a categorical `segment` and a continuous `size`; each parent
//! has 1 to 5 children whose `segment` copies the parent's with probability
//! `match_prob` and is otherwise another category uniformly at random.
//! Children also carry an `amount` whose scale depends on their segment and
//! which is missing with probability `missing_prob`.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relschema::{ColumnData, RelationalDataset, RelationalSchema, Table};
use crate::rng;

pub const SCHEMA: &str = r#"[[tables]]
name = "parent"
columns = [
  { name = "parent_id", kind = "primary_key" },
  { name = "segment", kind = "categorical" },
  { name = "size", kind = "continuous" },
]

[[tables]]
name = "child"
columns = [
  { name = "child_id", kind = "primary_key" },
  { name = "parent_id", kind = "foreign_key", target_table = "parent" },
  { name = "segment", kind = "categorical" },
  { name = "amount", kind = "continuous" },
]
"#;

pub const SEGMENTS: [&str; 4] = ["A", "B", "C", "D"];
pub const SEGMENT_PROBS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
const AMOUNT_SCALE: [f64; 4] = [10.0, 20.0, 35.0, 60.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub parents: usize,
    pub min_children: usize,
    pub max_children: usize,
    pub match_prob: f64,
    pub missing_prob: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            parents: 500,
            min_children: 1,
            max_children: 5,
            match_prob: 0.9,
            missing_prob: 0.05,
            seed: 0,
        }
    }
}

pub fn schema() -> RelationalSchema {
    RelationalSchema::parse(SCHEMA).expect("toy schema is valid")
}

pub fn generate(cfg: &ToyConfig) -> Result<RelationalDataset> {
    if cfg.min_children > cfg.max_children || !(0.0..=1.0).contains(&cfg.match_prob) || !(0.0..=1.0).contains(&cfg.missing_prob) {
        return Err(Error::Config(format!("invalid toy configuration {cfg:?}")));
    }
    let mut rng = rng::stream(cfg.seed, "toy");
    let pick = WeightedIndex::new(SEGMENT_PROBS).expect("valid weights");
    let mut p_segment = Vec::with_capacity(cfg.parents);
    let mut p_size = Vec::with_capacity(cfg.parents);
    let mut c_parent = Vec::new();
    let mut c_segment = Vec::new();
    let mut c_amount = Vec::new();
    for p in 0..cfg.parents {
        let seg = pick.sample(&mut rng);
        p_segment.push(Some(seg as u32));
        let z: f64 = rng.sample(StandardNormal);
        p_size.push(Some(50.0 * (0.5 * z).exp()));
        for _ in 0..rng.random_range(cfg.min_children..=cfg.max_children) {
            let child_seg = if rng.random::<f64>() < cfg.match_prob {
                seg
            } else {
                let other = rng.random_range(0..SEGMENTS.len() - 1);
                if other >= seg { other + 1 } else { other }
            };
            let z: f64 = rng.sample(StandardNormal);
            let amount = AMOUNT_SCALE[child_seg] * (0.3 * z).exp();
            let missing = rng.random::<f64>() < cfg.missing_prob;
            c_parent.push(p);
            c_segment.push(Some(child_seg as u32));
            c_amount.push((!missing).then_some(amount));
        }
    }
    let mut schema = schema();
    for t in &mut schema.tables {
        let seg = t.column_index("segment").expect("toy tables have a segment");
        t.columns[seg].categories = SEGMENTS.iter().map(|s| s.to_string()).collect();
    }
    let n_children = c_parent.len();
    let ds = RelationalDataset {
        schema,
        tables: vec![
            Table {
                n_rows: cfg.parents,
                columns: vec![
                    ColumnData::PrimaryKey,
                    ColumnData::Categorical(p_segment),
                    ColumnData::Continuous(p_size),
                ],
            },
            Table {
                n_rows: n_children,
                columns: vec![
                    ColumnData::PrimaryKey,
                    ColumnData::ForeignKey(c_parent),
                    ColumnData::Categorical(c_segment),
                    ColumnData::Continuous(c_amount),
                ],
            },
        ],
    };
    ds.validate()?;
    Ok(ds)
}

/// Parent segment label, child segment label and the child-to-parent links
/// of a dataset with the toy schema.
fn segment_pairs(ds: &RelationalDataset) -> Result<Vec<(Option<String>, Option<String>)>> {
    let labels = |table: usize| -> Result<Vec<Option<String>>> {
        let spec = &ds.schema.tables[table];
        let col = spec
            .column_index("segment")
            .ok_or_else(|| Error::Schema(format!("table `{}` has no segment column", spec.name)))?;
        let ColumnData::Categorical(codes) = &ds.tables[table].columns[col] else {
            return Err(Error::Schema("segment must be categorical".into()));
        };
        let cats = &spec.columns[col].categories;
        Ok(codes.iter().map(|c| c.map(|c| cats[c as usize].clone())).collect())
    };
    let (pi, ci) = match (ds.schema.table_index("parent"), ds.schema.table_index("child")) {
        (Some(p), Some(c)) => (p, c),
        _ => return Err(Error::Schema("expected `parent` and `child` tables".into())),
    };
    let fk = ds.schema.tables[ci]
        .column_index("parent_id")
        .ok_or_else(|| Error::Schema("child table has no parent_id".into()))?;
    let ColumnData::ForeignKey(links) = &ds.tables[ci].columns[fk] else {
        return Err(Error::Schema("child.parent_id must be a foreign key".into()));
    };
    let (ps, cs) = (labels(pi)?, labels(ci)?);
    Ok(links.iter().zip(cs).map(|(&p, c)| (ps[p].clone(), c)).collect())
}

/// Fraction of children whose segment equals their parent's.
pub fn match_rate(ds: &RelationalDataset) -> Result<f64> {
    let pairs = segment_pairs(ds)?;
    if pairs.is_empty() {
        return Err(Error::Eval("no child rows".into()));
    }
    let hits = pairs.iter().filter(|(p, c)| p.is_some() && p == c).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Match rate expected if child segments were independent of their parents':
/// `sum_c P(parent segment = c) * P(child segment = c)`, both over child rows.
pub fn chance_match_rate(ds: &RelationalDataset) -> Result<f64> {
    let pairs = segment_pairs(ds)?;
    if pairs.is_empty() {
        return Err(Error::Eval("no child rows".into()));
    }
    let n = pairs.len() as f64;
    let mut labels: Vec<&String> = pairs.iter().filter_map(|(p, _)| p.as_ref()).collect();
    labels.sort();
    labels.dedup();
    Ok(labels
        .into_iter()
        .map(|l| {
            let pp = pairs.iter().filter(|(p, _)| p.as_ref() == Some(l)).count() as f64 / n;
            let pc = pairs.iter().filter(|(_, c)| c.as_ref() == Some(l)).count() as f64 / n;
            pp * pc
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_and_rates() {
        let ds = generate(&ToyConfig::default()).unwrap();
        assert_eq!(ds.tables[0].n_rows, 500);
        let n = ds.tables[1].n_rows;
        assert!((1300..=1700).contains(&n), "{n}");
        let rate = match_rate(&ds).unwrap();
        assert!((rate - 0.9).abs() < 0.03, "{rate}");
        // 0.4^2 + 0.3^2 + 0.2^2 + 0.1^2 = 0.30 for independent segments
        let chance = chance_match_rate(&ds).unwrap();
        assert!((chance - 0.30).abs() < 0.04, "{chance}");
        let ColumnData::Continuous(a) = &ds.tables[1].columns[3] else { unreachable!() };
        let missing = a.iter().filter(|v| v.is_none()).count() as f64 / n as f64;
        assert!((missing - 0.05).abs() < 0.02, "{missing}");
    }

    #[test]
    fn independent_children_match_at_chance() {
        let ds = generate(&ToyConfig { match_prob: 0.25, parents: 4000, ..ToyConfig::default() }).unwrap();
        // P(match) = 0.25 under this mechanism, while chance stays near 0.30
        assert!((match_rate(&ds).unwrap() - 0.25).abs() < 0.02);
    }

    #[test]
    fn deterministic() {
        let cfg = ToyConfig { seed: 4, ..ToyConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
