//! Relational schema, CSV ingestion and export.
//!
//! A dataset is the pair of per-table record storage and the foreign-key
//! graph implied by its key columns. Primary keys are opaque: after ingest a
//! row is identified by its index, and foreign-key cells hold parent row
//! indices.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    PrimaryKey,
    ForeignKey,
}

impl ColumnKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "continuous" => Some(ColumnKind::Continuous),
            "categorical" => Some(ColumnKind::Categorical),
            "primary_key" => Some(ColumnKind::PrimaryKey),
            "foreign_key" => Some(ColumnKind::ForeignKey),
            _ => None,
        }
    }

    pub fn is_feature(self) -> bool {
        matches!(self, ColumnKind::Continuous | ColumnKind::Categorical)
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ColumnKind::Continuous => "continuous",
            ColumnKind::Categorical => "categorical",
            ColumnKind::PrimaryKey => "primary_key",
            ColumnKind::ForeignKey => "foreign_key",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Referenced table, for foreign keys only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_table: Option<String>,
    /// Category labels in first-appearance order, filled in at ingest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
}

impl TableSpec {
    pub fn primary_key(&self) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.kind == ColumnKind::PrimaryKey)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Indices of continuous and categorical columns, in declaration order.
    pub fn feature_columns(&self) -> impl Iterator<Item = usize> + '_ {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind.is_feature())
            .map(|(i, _)| i)
    }
}

/// A foreign-key link: `table.column -> target`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ForeignKey {
    pub child_table: usize,
    pub column: usize,
    pub parent_table: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalSchema {
    pub tables: Vec<TableSpec>,
}

#[derive(Deserialize)]
struct RawSchema {
    tables: Vec<RawTable>,
}

#[derive(Deserialize)]
struct RawTable {
    name: String,
    columns: Vec<RawColumn>,
}

#[derive(Deserialize)]
struct RawColumn {
    name: String,
    kind: String,
    target_table: Option<String>,
}

impl RelationalSchema {
    /// Parse and validate a TOML schema declaration.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawSchema = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let mut tables = Vec::with_capacity(raw.tables.len());
        for (ti, t) in raw.tables.into_iter().enumerate() {
            let mut columns = Vec::with_capacity(t.columns.len());
            for (ci, c) in t.columns.into_iter().enumerate() {
                let kind = ColumnKind::parse(&c.kind).ok_or_else(|| {
                    Error::Schema(format!(
                        "unknown kind `{}` at tables[{ti}].columns[{ci}] ({}.{})",
                        c.kind, t.name, c.name
                    ))
                })?;
                columns.push(ColumnSpec {
                    name: c.name,
                    kind,
                    target_table: c.target_table,
                    categories: Vec::new(),
                });
            }
            tables.push(TableSpec {
                name: t.name,
                columns,
            });
        }
        let schema = RelationalSchema { tables };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (ti, t) in self.tables.iter().enumerate() {
            if seen.insert(t.name.as_str(), ti).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate table `{}` at tables[{ti}]",
                    t.name
                )));
            }
        }
        for (ti, t) in self.tables.iter().enumerate() {
            let mut names = HashMap::new();
            let mut pk_count = 0;
            for (ci, c) in t.columns.iter().enumerate() {
                let loc = format!("tables[{ti}].columns[{ci}] ({}.{})", t.name, c.name);
                if names.insert(c.name.as_str(), ci).is_some() {
                    return Err(Error::Schema(format!("duplicate column at {loc}")));
                }
                match c.kind {
                    ColumnKind::PrimaryKey => pk_count += 1,
                    ColumnKind::ForeignKey => {
                        let target = c.target_table.as_deref().ok_or_else(|| {
                            Error::Schema(format!("foreign key without target_table at {loc}"))
                        })?;
                        let Some(&pi) = seen.get(target) else {
                            return Err(Error::Schema(format!(
                                "unknown target table `{target}` at {loc}"
                            )));
                        };
                        if self.tables[pi].primary_key().is_none() {
                            return Err(Error::Schema(format!(
                                "target table `{target}` has no primary key at {loc}"
                            )));
                        }
                    }
                    _ => {
                        if c.target_table.is_some() {
                            return Err(Error::Schema(format!(
                                "target_table on non-foreign-key column at {loc}"
                            )));
                        }
                    }
                }
            }
            if pk_count > 1 {
                return Err(Error::Schema(format!(
                    "table `{}` declares {pk_count} primary keys",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// All foreign-key links in canonical (table, column) order.
    pub fn foreign_keys(&self) -> Vec<ForeignKey> {
        let mut out = Vec::new();
        for (ti, t) in self.tables.iter().enumerate() {
            for (ci, c) in t.columns.iter().enumerate() {
                if c.kind == ColumnKind::ForeignKey {
                    let target = c.target_table.as_deref().unwrap_or_default();
                    if let Some(pi) = self.table_index(target) {
                        out.push(ForeignKey {
                            child_table: ti,
                            column: ci,
                            parent_table: pi,
                        });
                    }
                }
            }
        }
        out
    }

    /// Tables referenced by at least one foreign key, in schema order.
    pub fn parent_tables(&self) -> Vec<usize> {
        let fks = self.foreign_keys();
        (0..self.tables.len())
            .filter(|&t| fks.iter().any(|fk| fk.parent_table == t))
            .collect()
    }

    /// Copy with ingest-time category lists removed.
    pub fn structure(&self) -> RelationalSchema {
        let mut s = self.clone();
        for t in &mut s.tables {
            for c in &mut t.columns {
                c.categories.clear();
            }
        }
        s
    }

    /// Hex SHA-256 of the canonical structure (categories excluded).
    pub fn structure_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.structure()).expect("schema serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Column storage. Key columns hold row indices, never original key values.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Continuous(Vec<Option<f64>>),
    Categorical(Vec<Option<u32>>),
    /// Row `i` has key `i`.
    PrimaryKey,
    /// Parent row index per child row.
    ForeignKey(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub n_rows: usize,
    /// Aligned with the schema's column list.
    pub columns: Vec<ColumnData>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub child_table: usize,
    pub child_row: usize,
    pub fk_column: usize,
    pub parent_table: usize,
    pub parent_row: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationalDataset {
    pub schema: RelationalSchema,
    pub tables: Vec<Table>,
}

impl RelationalDataset {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.schema.table_index(name).map(|i| &self.tables[i])
    }

    pub fn row_counts(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.n_rows).collect()
    }

    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for fk in self.schema.foreign_keys() {
            if let ColumnData::ForeignKey(parents) = &self.tables[fk.child_table].columns[fk.column] {
                for (child_row, &parent_row) in parents.iter().enumerate() {
                    out.push(Edge {
                        child_table: fk.child_table,
                        child_row,
                        fk_column: fk.column,
                        parent_table: fk.parent_table,
                        parent_row,
                    });
                }
            }
        }
        out
    }

    /// Integrity check: column shapes, category ranges, referential integrity.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.tables.len() != self.schema.tables.len() {
            return Err(Error::Schema(format!(
                "dataset has {} tables, schema declares {}",
                self.tables.len(),
                self.schema.tables.len()
            )));
        }
        for (ti, (spec, table)) in self.schema.tables.iter().zip(&self.tables).enumerate() {
            if table.columns.len() != spec.columns.len() {
                return Err(Error::Schema(format!(
                    "table `{}` has {} columns, schema declares {}",
                    spec.name,
                    table.columns.len(),
                    spec.columns.len()
                )));
            }
            for (col, data) in spec.columns.iter().zip(&table.columns) {
                let loc = format!("{}.{}", spec.name, col.name);
                let len = match (col.kind, data) {
                    (ColumnKind::Continuous, ColumnData::Continuous(v)) => {
                        if v.iter().flatten().any(|x| !x.is_finite()) {
                            return Err(Error::Schema(format!("non-finite value in {loc}")));
                        }
                        v.len()
                    }
                    (ColumnKind::Categorical, ColumnData::Categorical(v)) => {
                        let n = col.categories.len() as u32;
                        if let Some(bad) = v.iter().flatten().find(|&&c| c >= n) {
                            return Err(Error::Schema(format!(
                                "category index {bad} out of range ({n} categories) in {loc}"
                            )));
                        }
                        v.len()
                    }
                    (ColumnKind::PrimaryKey, ColumnData::PrimaryKey) => table.n_rows,
                    (ColumnKind::ForeignKey, ColumnData::ForeignKey(v)) => {
                        let target = col.target_table.as_deref().unwrap_or_default();
                        let pi = self.schema.table_index(target).ok_or_else(|| {
                            Error::Schema(format!("unknown target table `{target}` in {loc}"))
                        })?;
                        let n_parent = self.tables[pi].n_rows;
                        if let Some((row, &p)) = v.iter().enumerate().find(|(_, &p)| p >= n_parent) {
                            return Err(Error::Schema(format!(
                                "dangling foreign key in {loc} row {row}: parent row {p} of {n_parent}"
                            )));
                        }
                        v.len()
                    }
                    _ => {
                        return Err(Error::Schema(format!(
                            "storage kind does not match declared kind {} in {loc}",
                            col.kind
                        )))
                    }
                };
                if len != table.n_rows {
                    return Err(Error::Schema(format!(
                        "column {loc} has {len} cells, table {ti} has {} rows",
                        table.n_rows
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Read `<table>.csv` for every table in `schema` from `dir`.
pub fn ingest(schema: &RelationalSchema, dir: &Path) -> Result<RelationalDataset> {
    schema.validate()?;
    let mut raw = Vec::with_capacity(schema.tables.len());
    for spec in &schema.tables {
        raw.push(read_table_csv(spec, &dir.join(format!("{}.csv", spec.name)))?);
    }

    // primary key value -> row index, per table
    let mut key_maps: Vec<Option<HashMap<String, usize>>> = Vec::with_capacity(raw.len());
    for (spec, rows) in schema.tables.iter().zip(&raw) {
        let path = dir.join(format!("{}.csv", spec.name));
        let Some(pk) = spec.primary_key() else {
            key_maps.push(None);
            continue;
        };
        let mut map = HashMap::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let key = row[pk].trim();
            if key.is_empty() {
                return Err(Error::data(&path, format!("row {}: missing primary key", i + 1)));
            }
            if map.insert(key.to_string(), i).is_some() {
                return Err(Error::data(&path, format!("row {}: duplicate primary key `{key}`", i + 1)));
            }
        }
        key_maps.push(Some(map));
    }

    let mut out_schema = schema.clone();
    let mut tables = Vec::with_capacity(raw.len());
    for (ti, rows) in raw.iter().enumerate() {
        let spec = &schema.tables[ti];
        let path = dir.join(format!("{}.csv", spec.name));
        let mut columns = Vec::with_capacity(spec.columns.len());
        for (ci, col) in spec.columns.iter().enumerate() {
            let data = match col.kind {
                ColumnKind::PrimaryKey => ColumnData::PrimaryKey,
                ColumnKind::Continuous => {
                    let mut v = Vec::with_capacity(rows.len());
                    for (i, row) in rows.iter().enumerate() {
                        v.push(parse_number(row[ci].trim()).map_err(|msg| {
                            Error::data(&path, format!("row {}, column `{}`: {msg}", i + 1, col.name))
                        })?);
                    }
                    ColumnData::Continuous(v)
                }
                ColumnKind::Categorical => {
                    let mut labels: Vec<String> = Vec::new();
                    let mut index: HashMap<&str, u32> = HashMap::new();
                    let mut v = Vec::with_capacity(rows.len());
                    for row in rows {
                        let cell = row[ci].as_str();
                        if cell.is_empty() {
                            v.push(None);
                            continue;
                        }
                        let next = labels.len() as u32;
                        let idx = *index.entry(cell).or_insert_with(|| {
                            labels.push(cell.to_string());
                            next
                        });
                        v.push(Some(idx));
                    }
                    out_schema.tables[ti].columns[ci].categories = labels;
                    ColumnData::Categorical(v)
                }
                ColumnKind::ForeignKey => {
                    let target = col.target_table.as_deref().unwrap_or_default();
                    let pi = schema.table_index(target).expect("validated schema");
                    let map = key_maps[pi].as_ref().expect("validated target has primary key");
                    let mut v = Vec::with_capacity(rows.len());
                    for (i, row) in rows.iter().enumerate() {
                        let key = row[ci].trim();
                        if key.is_empty() {
                            return Err(Error::data(
                                &path,
                                format!("row {}, column `{}`: missing foreign key", i + 1, col.name),
                            ));
                        }
                        let parent = map.get(key).ok_or_else(|| {
                            Error::data(
                                &path,
                                format!(
                                    "row {}, column `{}`: dangling foreign key `{key}` (no such row in `{target}`)",
                                    i + 1,
                                    col.name
                                ),
                            )
                        })?;
                        v.push(*parent);
                    }
                    ColumnData::ForeignKey(v)
                }
            };
            columns.push(data);
        }
        tables.push(Table {
            n_rows: rows.len(),
            columns,
        });
    }

    let ds = RelationalDataset {
        schema: out_schema,
        tables,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_number(cell: &str) -> std::result::Result<Option<f64>, String> {
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(x) if x.is_nan() => Ok(None),
        Ok(x) if x.is_finite() => Ok(Some(x)),
        Ok(_) => Err(format!("non-finite value `{cell}`")),
        Err(_) => Err(format!("non-numeric value `{cell}` in continuous column")),
    }
}

/// Rows re-ordered to schema column order.
fn read_table_csv(spec: &TableSpec, path: &Path) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::data(path, e.to_string()))?
        .clone();
    let mut position = Vec::with_capacity(spec.columns.len());
    for col in &spec.columns {
        let pos = header.iter().position(|h| h == col.name).ok_or_else(|| {
            Error::data(path, format!("header mismatch: missing column `{}`", col.name))
        })?;
        position.push(pos);
    }
    if let Some(extra) = header.iter().find(|h| spec.column_index(h).is_none()) {
        return Err(Error::data(path, format!("header mismatch: unexpected column `{extra}`")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(path, e.to_string()))?;
        rows.push(position.iter().map(|&p| record[p].to_string()).collect());
    }
    Ok(rows)
}

/// Write one CSV per table. Keys are written as row indices.
pub fn write_dataset(ds: &RelationalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (spec, table) in ds.schema.tables.iter().zip(&ds.tables) {
        let path = dir.join(format!("{}.csv", spec.name));
        let mut writer = csv::Writer::from_path(&path).map_err(|e| Error::data(&path, e.to_string()))?;
        let csv_err = |e: csv::Error| Error::data(&path, e.to_string());
        writer
            .write_record(spec.columns.iter().map(|c| c.name.as_str()))
            .map_err(csv_err)?;
        let mut record = Vec::with_capacity(spec.columns.len());
        for row in 0..table.n_rows {
            record.clear();
            for (col, data) in spec.columns.iter().zip(&table.columns) {
                record.push(match data {
                    ColumnData::PrimaryKey => row.to_string(),
                    ColumnData::ForeignKey(v) => v[row].to_string(),
                    ColumnData::Continuous(v) => v[row].map(|x| x.to_string()).unwrap_or_default(),
                    ColumnData::Categorical(v) => v[row]
                        .map(|c| col.categories[c as usize].clone())
                        .unwrap_or_default(),
                });
            }
            writer.write_record(&record).map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
