use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use super::frame::{aggregate, Frame, FrameValues};
use super::gbdt::{gbdt_fit_predict, GbdtSpec, MISSING};
use crate::error::{Error, Result};
use crate::relschema::RelationalDataset;
use crate::rng;

/// Encode two frames with identical columns into numeric rows: numbers pass
/// through with missing cells at [`MISSING`], categoricals become one-hot
/// over the sorted union of labels plus a missing slot when needed.
pub fn encode_pair(a: &Frame, b: &Frame) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if a.column_names() != b.column_names() {
        return Err(Error::Schema(format!("frames for `{}` have different columns", a.table)));
    }
    let mut ra = vec![Vec::new(); a.n_rows];
    let mut rb = vec![Vec::new(); b.n_rows];
    for (ca, cb) in a.columns.iter().zip(&b.columns) {
        match (&ca.values, &cb.values) {
            (FrameValues::Numeric(va), FrameValues::Numeric(vb)) => {
                for (rows, v) in [(&mut ra, va), (&mut rb, vb)] {
                    for (row, x) in rows.iter_mut().zip(v) {
                        row.push(x.unwrap_or(MISSING));
                    }
                }
            }
            (FrameValues::Categorical(va), FrameValues::Categorical(vb)) => {
                let labels: BTreeSet<&str> = va.iter().chain(vb).flatten().map(String::as_str).collect();
                let labels: Vec<&str> = labels.into_iter().collect();
                let has_missing = va.iter().chain(vb).any(Option::is_none);
                let width = labels.len() + usize::from(has_missing);
                for (rows, v) in [(&mut ra, va), (&mut rb, vb)] {
                    for (row, x) in rows.iter_mut().zip(v) {
                        let hot = match x {
                            Some(l) => labels.binary_search(&l.as_str()).expect("label in union"),
                            None => labels.len(),
                        };
                        row.extend((0..width).map(|k| f64::from(u8::from(k == hot))));
                    }
                }
            }
            _ => return Err(Error::Schema(format!("column `{}.{}` changes type", a.table, ca.name))),
        }
    }
    Ok((ra, rb))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DdaRow {
    pub table: String,
    pub accuracy: f64,
    pub n_real: usize,
    pub n_synth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DdaReport {
    pub tables: Vec<DdaRow>,
    pub max_accuracy: Option<f64>,
}

/// Discriminator accuracy on every aggregated parent table.
pub fn dda_accuracy(real: &RelationalDataset, synth: &RelationalDataset, spec: &GbdtSpec, seed: u64) -> Result<DdaReport> {
    if real.schema.structure_hash() != synth.schema.structure_hash() {
        return Err(Error::Schema("real and synthetic datasets have different schemas".into()));
    }
    let tables = real
        .schema
        .parent_tables()
        .into_par_iter()
        .map(|t| {
            let (fr, fs) = (aggregate(real, t)?, aggregate(synth, t)?);
            let (xr, xs) = encode_pair(&fr, &fs)?;
            let stream = format!("{}/{}", rng::DISCRIMINATOR, fr.table);
            let accuracy = gbdt_fit_predict(spec, &xr, &xs, seed, &stream)
                .map_err(|e| Error::Eval(format!("table `{}`: {e}", fr.table)))?;
            Ok(DdaRow {
                table: fr.table,
                accuracy,
                n_real: fr.n_rows,
                n_synth: fs.n_rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_accuracy = tables.iter().map(|r| r.accuracy).reduce(f64::max);
    Ok(DdaReport { tables, max_accuracy })
}
