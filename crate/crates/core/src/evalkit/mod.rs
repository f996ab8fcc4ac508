//! Fidelity and privacy evaluation of synthetic relational data.
//!
//! Fidelity is the held-out accuracy of a boosted-tree discriminator trained
//! to tell real from synthetic parent rows enriched with child aggregates.
//! Privacy compares distances to the closest training record for synthetic
//! rows against those of real holdout rows.

mod dcr;
mod dda;
mod frame;
mod gbdt;

pub use dcr::{dcr, dcr_privacy, privacy_score, quantile, GowerSpace, PrivacyRow, DEFAULT_ALPHA, MIN_HOLDOUT_ROWS};
pub use dda::{dda_accuracy, encode_pair, DdaReport, DdaRow};
pub use frame::{aggregate, table_frame, Frame, FrameColumn, FrameValues};
pub use gbdt::{gbdt_fit_predict, Gbdt, GbdtSpec, MISSING, MIN_ROWS_PER_CLASS, TEST_FRACTION};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relschema::RelationalDataset;
use crate::rng;

pub const DISCRIMINATOR_NOTE: &str =
    "discriminator: exact-greedy gradient-boosted trees (logistic loss), a re-implementation rather than XGBoost; accuracies are comparable in kind, not bit-for-bit";
pub const DISTANCE_NOTE: &str =
    "DCR distance: Gower-style mean of per-column distances (range-scaled absolute difference, categorical mismatch, missing vs present = 1)";
pub const SCORE_NOTE: &str = "privacy score (p - alpha) / (1 - alpha) is a reconstruction chosen to be 0 at no risk and 1 when every synthetic row is risky";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub gbdt: GbdtSpec,
    pub alpha: f64,
    pub seed: u64,
    /// Tables with fewer real rows are left out of the privacy section.
    pub min_rows: usize,
    /// Tables with fewer feature columns are left out of the privacy section.
    pub min_columns: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            gbdt: GbdtSpec::default(),
            alpha: DEFAULT_ALPHA,
            seed: 0,
            min_rows: 100,
            min_columns: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub notes: Vec<String>,
    pub options: EvalOptions,
    /// `"provided"` or `"split"` (half of the real rows, per table).
    pub holdout: String,
    pub dda: DdaReport,
    pub privacy: Vec<PrivacyRow>,
    pub worst_privacy_score: Option<f64>,
    pub warnings: Vec<String>,
}

/// Feature frame used for a table in both sections: parent tables carry
/// child aggregates.
pub fn eval_frame(ds: &RelationalDataset, table: usize) -> Result<Frame> {
    if ds.schema.parent_tables().contains(&table) {
        aggregate(ds, table)
    } else {
        table_frame(ds, table)
    }
}

/// Run both sections. Without a `holdout` dataset, each table's real rows
/// are split in half: one half is the training reference, the other the
/// holdout.
pub fn evaluate(
    real: &RelationalDataset,
    holdout: Option<&RelationalDataset>,
    synth: &RelationalDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.gbdt.validate()?;
    let hash = real.schema.structure_hash();
    if synth.schema.structure_hash() != hash || holdout.is_some_and(|h| h.schema.structure_hash() != hash) {
        return Err(Error::Schema("datasets do not share one schema".into()));
    }
    let dda = dda_accuracy(real, synth, &opts.gbdt, opts.seed)?;

    let mut privacy = Vec::new();
    let mut warnings = Vec::new();
    for t in 0..real.schema.tables.len() {
        let full = eval_frame(real, t)?;
        if full.n_rows < opts.min_rows || full.columns.len() < opts.min_columns {
            continue;
        }
        let (train, hold) = match holdout {
            Some(h) => (full, eval_frame(h, t)?),
            None => {
                let mut rows: Vec<usize> = (0..full.n_rows).collect();
                rows.shuffle(&mut rng::substream(opts.seed, rng::DCR_SPLIT, t as u64));
                let (a, b) = rows.split_at(full.n_rows / 2);
                (full.select(a), full.select(b))
            }
        };
        let row = dcr_privacy(&train, &hold, &eval_frame(synth, t)?, opts.alpha)?;
        if row.small_holdout {
            warnings.push(format!(
                "table `{}`: holdout has {} rows (< {MIN_HOLDOUT_ROWS}); the threshold is unreliable",
                row.table, row.n_holdout
            ));
        }
        privacy.push(row);
    }
    let worst_privacy_score = privacy.iter().map(|r| r.score).reduce(f64::max);
    Ok(EvalReport {
        notes: vec![DISCRIMINATOR_NOTE.into(), DISTANCE_NOTE.into(), SCORE_NOTE.into()],
        options: opts.clone(),
        holdout: if holdout.is_some() { "provided" } else { "split" }.into(),
        dda,
        privacy,
        worst_privacy_score,
        warnings,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            s.push_str(&format!("# {n}\n"));
        }
        s.push_str("\nDDA accuracy (0.5 = indistinguishable)\n");
        for r in &self.dda.tables {
            s.push_str(&format!("  {:<24} {:.4}  (real {}, synthetic {})\n", r.table, r.accuracy, r.n_real, r.n_synth));
        }
        match self.dda.max_accuracy {
            Some(m) => s.push_str(&format!("  max {m:.4}\n")),
            None => s.push_str("  no parent tables\n"),
        }
        s.push_str(&format!(
            "\nPrivacy (alpha = {}, holdout {})\n",
            self.options.alpha, self.holdout
        ));
        for r in &self.privacy {
            s.push_str(&format!(
                "  {:<24} p<=alpha {:.4}  score {:+.4}  threshold {:.4}  (train {}, holdout {}, synthetic {})\n",
                r.table, r.p_below, r.score, r.threshold, r.n_train, r.n_holdout, r.n_synth
            ));
        }
        match self.worst_privacy_score {
            Some(w) => s.push_str(&format!("  worst score {w:+.4}\n")),
            None => s.push_str("  no eligible tables\n"),
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}
