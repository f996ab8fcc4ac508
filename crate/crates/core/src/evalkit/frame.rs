//! Flat per-table feature frames and child aggregation.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::relschema::{ColumnData, ColumnKind, RelationalDataset};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum FrameValues {
    Numeric(Vec<Option<f64>>),
    /// Category labels, so frames from separately ingested datasets compare.
    Categorical(Vec<Option<String>>),
}

impl FrameValues {
    pub fn len(&self) -> usize {
        match self {
            FrameValues::Numeric(v) => v.len(),
            FrameValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameColumn {
    pub name: String,
    pub values: FrameValues,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Frame {
    pub table: String,
    pub n_rows: usize,
    pub columns: Vec<FrameColumn>,
}

impl Frame {
    pub fn column(&self, name: &str) -> Option<&FrameValues> {
        self.columns.iter().find(|c| c.name == name).map(|c| &c.values)
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Frame {
        let columns = self
            .columns
            .iter()
            .map(|c| FrameColumn {
                name: c.name.clone(),
                values: match &c.values {
                    FrameValues::Numeric(v) => FrameValues::Numeric(rows.iter().map(|&r| v[r]).collect()),
                    FrameValues::Categorical(v) => {
                        FrameValues::Categorical(rows.iter().map(|&r| v[r].clone()).collect())
                    }
                },
            })
            .collect();
        Frame {
            table: self.table.clone(),
            n_rows: rows.len(),
            columns,
        }
    }
}

/// Own feature columns of a table.
pub fn table_frame(ds: &RelationalDataset, table: usize) -> Result<Frame> {
    let spec = ds
        .schema
        .tables
        .get(table)
        .ok_or_else(|| Error::Eval(format!("no table with index {table}")))?;
    let data = &ds.tables[table];
    let mut columns = Vec::new();
    for c in spec.feature_columns() {
        let col = &spec.columns[c];
        let values = match &data.columns[c] {
            ColumnData::Continuous(v) => FrameValues::Numeric(v.clone()),
            ColumnData::Categorical(v) => FrameValues::Categorical(
                v.iter()
                    .map(|code| code.map(|k| col.categories[k as usize].clone()))
                    .collect(),
            ),
            _ => return Err(Error::Shape(format!("column `{}.{}` has key storage", spec.name, col.name))),
        };
        columns.push(FrameColumn {
            name: col.name.clone(),
            values,
        });
    }
    Ok(Frame {
        table: spec.name.clone(),
        n_rows: data.n_rows,
        columns,
    })
}

/// Parent features plus, for every foreign key pointing at `parent`, the
/// child count, per-column means of continuous child columns and distinct
/// counts of categorical child columns. Missing child cells are skipped;
/// parents without children get a count of 0 and missing derived values.
///
/// Columns are named `<child>__count`, `<child>__<col>__mean` and
/// `<child>__<col>__nunique`; when one child table has several foreign keys
/// to the same parent the prefix becomes `<child>[<fk column>]`.
pub fn aggregate(ds: &RelationalDataset, parent: usize) -> Result<Frame> {
    let mut frame = table_frame(ds, parent)?;
    let fks: Vec<_> = ds
        .schema
        .foreign_keys()
        .into_iter()
        .filter(|fk| fk.parent_table == parent)
        .collect();
    if fks.is_empty() {
        return Err(Error::Eval(format!(
            "table `{}` has no child tables to aggregate",
            ds.schema.tables[parent].name
        )));
    }
    let n = frame.n_rows;
    for fk in &fks {
        let child_spec = &ds.schema.tables[fk.child_table];
        let child = &ds.tables[fk.child_table];
        let ColumnData::ForeignKey(links) = &child.columns[fk.column] else {
            return Err(Error::Shape(format!("`{}` foreign key is not stored as links", child_spec.name)));
        };
        let ambiguous = fks.iter().filter(|o| o.child_table == fk.child_table).count() > 1;
        let prefix = if ambiguous {
            format!("{}[{}]", child_spec.name, child_spec.columns[fk.column].name)
        } else {
            child_spec.name.clone()
        };

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (row, &p) in links.iter().enumerate() {
            members[p].push(row);
        }
        frame.columns.push(FrameColumn {
            name: format!("{prefix}__count"),
            values: FrameValues::Numeric(members.iter().map(|m| Some(m.len() as f64)).collect()),
        });
        for c in child_spec.feature_columns() {
            let col = &child_spec.columns[c];
            let (suffix, values) = match (&child.columns[c], col.kind) {
                (ColumnData::Continuous(v), ColumnKind::Continuous) => {
                    let means = members
                        .iter()
                        .map(|m| {
                            let seen: Vec<f64> = m.iter().filter_map(|&r| v[r]).collect();
                            (!seen.is_empty()).then(|| seen.iter().sum::<f64>() / seen.len() as f64)
                        })
                        .collect();
                    ("mean", means)
                }
                (ColumnData::Categorical(v), ColumnKind::Categorical) => {
                    let counts = members
                        .iter()
                        .map(|m| {
                            (!m.is_empty()).then(|| {
                                m.iter().filter_map(|&r| v[r]).collect::<BTreeSet<u32>>().len() as f64
                            })
                        })
                        .collect();
                    ("nunique", counts)
                }
                _ => return Err(Error::Shape(format!("column `{}.{}` storage mismatch", child_spec.name, col.name))),
            };
            frame.columns.push(FrameColumn {
                name: format!("{prefix}__{}__{suffix}", col.name),
                values: FrameValues::Numeric(values),
            });
        }
    }
    Ok(frame)
}
