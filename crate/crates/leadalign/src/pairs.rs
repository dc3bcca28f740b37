//! Self-cut positive pairs and the zero-mask adaptation.
//!
//! A positive pair is one record seen twice: the configured cut lead as a
//! `[1 x t]` single-lead view and the untouched full record as the multi-lead
//! view. No augmentation of any kind — the single view is a bitwise row
//! extraction. Off-diagonal pairings inside a batch are the negatives, which
//! is only sound when every record id is distinct, so collation rejects
//! duplicates.

use std::collections::HashSet;

use ndarray::{Array2, Axis};

use crate::ecg::ECGRecord;
use crate::error::{Error, Result};

/// Default cut lead: the standard smartwatch channel.
pub const DEFAULT_CUT_LEAD: &str = "I";

/// A single-lead view paired with its source multi-lead record.
#[derive(Debug, Clone, PartialEq)]
pub struct SMPair {
    pub record_id: String,
    /// `[1 x t]`, bitwise equal to one row of `multi_view`.
    pub single_view: Array2<f32>,
    /// `[c x t]`, the full record.
    pub multi_view: Array2<f32>,
}

/// An ordered batch of pairs with distinct record ids and a common length.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pairs: Vec<SMPair>,
}

impl PairBatch {
    pub fn size(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_timestamps(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.multi_view.ncols())
    }

    pub fn record_ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.record_id.clone()).collect()
    }
}

/// Extract the cut lead as the single view; the multi view is the full record.
pub fn self_cut(record: &ECGRecord, cut_lead: &str) -> Result<SMPair> {
    let row = record.lead_row(cut_lead)?;
    let single_view = record
        .samples
        .row(row)
        .to_owned()
        .insert_axis(Axis(0));
    Ok(SMPair {
        record_id: record.id.clone(),
        single_view,
        multi_view: record.samples.clone(),
    })
}

/// Zero every lead except `keep_lead`, preserving shape. The kept row is
/// bitwise unchanged; idempotent.
pub fn zero_mask(record: &ECGRecord, keep_lead: &str) -> Result<ECGRecord> {
    let keep = record.lead_row(keep_lead)?;
    let mut out = record.clone();
    for (row, mut lane) in out.samples.rows_mut().into_iter().enumerate() {
        if row != keep {
            lane.fill(0.0);
        }
    }
    Ok(out)
}

/// Build a batch of self-cut pairs preserving input order.
pub fn collate(records: &[&ECGRecord], cut_lead: &str) -> Result<PairBatch> {
    let first_len = match records.first() {
        Some(r) => r.num_samples(),
        None => {
            return Err(Error::DatasetTooSmall {
                needed: 1,
                actual: 0,
            })
        }
    };
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(records.len());
    for record in records {
        if record.num_samples() != first_len {
            return Err(Error::LengthMismatch {
                expected: first_len,
                actual: record.num_samples(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateRecord(record.id.clone()));
        }
        pairs.push(self_cut(record, cut_lead)?);
    }
    Ok(PairBatch { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecg::CANONICAL_LEADS;
    use ndarray::Array2;
    use std::collections::BTreeSet;

    fn twelve_lead(id: &str, t: usize) -> ECGRecord {
        let samples = Array2::from_shape_fn((12, t), |(l, i)| (l * t + i) as f32 * 0.01 - 3.0);
        ECGRecord {
            id: id.to_string(),
            samples,
            lead_names: CANONICAL_LEADS.iter().map(|s| s.to_string()).collect(),
            sampling_rate_hz: 500.0,
            labels: BTreeSet::new(),
        }
    }

    #[test]
    fn self_cut_extracts_row_zero_for_lead_i() {
        let r = twelve_lead("a", 50);
        let pair = self_cut(&r, "I").unwrap();
        assert_eq!(pair.single_view.shape(), &[1, 50]);
        assert_eq!(pair.single_view.row(0), r.samples.row(0));
        assert_eq!(pair.multi_view, r.samples);
    }

    #[test]
    fn self_cut_v6_is_row_eleven() {
        let r = twelve_lead("a", 20);
        let pair = self_cut(&r, "V6").unwrap();
        assert_eq!(pair.single_view.row(0), r.samples.row(11));
    }

    #[test]
    fn self_cut_missing_lead_errors() {
        let mut r = twelve_lead("a", 20);
        r.lead_names.pop();
        r.samples = r.samples.slice(ndarray::s![..11, ..]).to_owned();
        assert!(matches!(self_cut(&r, "V6"), Err(Error::UnknownLead(_))));
    }

    #[test]
    fn zero_mask_keeps_one_row() {
        let r = twelve_lead("a", 30);
        let masked = zero_mask(&r, "I").unwrap();
        assert_eq!(masked.samples.row(0), r.samples.row(0));
        for row in 1..12 {
            assert!(masked.samples.row(row).iter().all(|&v| v == 0.0));
        }
        // idempotent
        let twice = zero_mask(&masked, "I").unwrap();
        assert_eq!(twice.samples, masked.samples);
    }

    #[test]
    fn collate_preserves_order_and_commutes_with_permutation() {
        let records: Vec<ECGRecord> = (0..6).map(|i| twelve_lead(&format!("r{i}"), 40)).collect();
        let refs: Vec<&ECGRecord> = records.iter().collect();
        let batch = collate(&refs, "I").unwrap();
        assert_eq!(batch.size(), 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<&ECGRecord> = perm.iter().map(|&i| &records[i]).collect();
        let batch_p = collate(&permuted, "I").unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(batch_p.pairs[k], batch.pairs[i]);
        }
    }

    #[test]
    fn collate_rejects_duplicates_and_mixed_lengths() {
        let a = twelve_lead("same", 40);
        let b = twelve_lead("same", 40);
        assert!(matches!(
            collate(&[&a, &b], "I"),
            Err(Error::DuplicateRecord(_))
        ));
        let c = twelve_lead("other", 41);
        assert!(matches!(
            collate(&[&a, &c], "I"),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
