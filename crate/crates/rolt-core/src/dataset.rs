//! In-memory dataset representation.
//!
//! Embeddings are dense `N x D` matrices of `f64`. Labels are stored
//! zero-based in memory; the on-disk CSV formats are one-based (see
//! [`crate::io`]).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoltError};

/// Which side of the train/test split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// A dataset of embeddings with (possibly corrupted) labels.
///
/// `true_labels` are kept for evaluation only and may be absent for
/// externally produced data.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub embeddings: Array2<f64>,
    pub noisy_labels: Vec<usize>,
    pub true_labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub split_tag: SplitTag,
}

impl LabeledDataset {
    /// Build a dataset, checking every invariant: finite embeddings,
    /// labels in `[0, K)`, and matching lengths.
    pub fn new(
        embeddings: Array2<f64>,
        noisy_labels: Vec<usize>,
        true_labels: Option<Vec<usize>>,
        class_count: usize,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(RoltError::InvalidDataset("class_count must be >= 1".into()));
        }
        if embeddings.nrows() != noisy_labels.len() {
            return Err(RoltError::DimensionMismatch(format!(
                "{} embedding rows vs {} labels",
                embeddings.nrows(),
                noisy_labels.len()
            )));
        }
        if let Some(truth) = &true_labels {
            if truth.len() != noisy_labels.len() {
                return Err(RoltError::DimensionMismatch(format!(
                    "{} true labels vs {} noisy labels",
                    truth.len(),
                    noisy_labels.len()
                )));
            }
            if let Some(&bad) = truth.iter().find(|&&y| y >= class_count) {
                return Err(RoltError::InvalidDataset(format!(
                    "true label {bad} out of range for {class_count} classes"
                )));
            }
        }
        if let Some(&bad) = noisy_labels.iter().find(|&&y| y >= class_count) {
            return Err(RoltError::InvalidDataset(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(RoltError::InvalidDataset(
                "embeddings contain non-finite values".into(),
            ));
        }
        Ok(Self {
            embeddings,
            noisy_labels,
            true_labels,
            class_count,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    /// Embedding dimensionality.
    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Example indices grouped by their current (noisy) label:
    /// element `k` holds all `i` with `noisy_labels[i] == k`.
    pub fn class_index_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.class_count];
        for (i, &y) in self.noisy_labels.iter().enumerate() {
            sets[y].push(i);
        }
        sets
    }

    /// Per-class example counts under the noisy labels.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &y in &self.noisy_labels {
            counts[y] += 1;
        }
        counts
    }

    /// Per-class example counts under ground-truth labels, when present.
    pub fn true_class_counts(&self) -> Option<Vec<usize>> {
        self.true_labels.as_ref().map(|truth| {
            let mut counts = vec![0usize; self.class_count];
            for &y in truth {
                counts[y] += 1;
            }
            counts
        })
    }

    /// Content fingerprint (FNV-1a over shape, embedding bytes, and labels).
    /// Used to assert that paired comparisons ran on identical data.
    pub fn content_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        eat(&(self.len() as u64).to_le_bytes());
        eat(&(self.dim() as u64).to_le_bytes());
        eat(&(self.class_count as u64).to_le_bytes());
        for v in self.embeddings.iter() {
            eat(&v.to_le_bytes());
        }
        for &y in &self.noisy_labels {
            eat(&(y as u64).to_le_bytes());
        }
        if let Some(truth) = &self.true_labels {
            for &y in truth {
                eat(&(y as u64).to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_out_of_range_labels() {
        let e = array![[0.0, 1.0], [1.0, 0.0]];
        let err = LabeledDataset::new(e, vec![0, 2], None, 2, SplitTag::Train);
        assert!(matches!(err, Err(RoltError::InvalidDataset(_))));
    }

    #[test]
    fn rejects_non_finite_embeddings() {
        let e = array![[0.0, f64::NAN]];
        let err = LabeledDataset::new(e, vec![0], None, 1, SplitTag::Train);
        assert!(matches!(err, Err(RoltError::InvalidDataset(_))));
    }

    #[test]
    fn rejects_length_mismatch_with_truth() {
        let e = array![[0.0, 1.0], [1.0, 0.0]];
        let err = LabeledDataset::new(e, vec![0, 1], Some(vec![0]), 2, SplitTag::Train);
        assert!(matches!(err, Err(RoltError::DimensionMismatch(_))));
    }

    #[test]
    fn class_index_sets_partition_examples() {
        let e = array![[0.0], [1.0], [2.0], [3.0]];
        let ds = LabeledDataset::new(e, vec![1, 0, 1, 2], None, 3, SplitTag::Train).unwrap();
        let sets = ds.class_index_sets();
        assert_eq!(sets, vec![vec![1], vec![0, 2], vec![3]]);
        assert_eq!(ds.class_counts(), vec![1, 2, 1]);
    }

    #[test]
    fn content_hash_tracks_content() {
        let e = array![[0.0, 1.0], [1.0, 0.0]];
        let a = LabeledDataset::new(e.clone(), vec![0, 1], None, 2, SplitTag::Train).unwrap();
        let b = LabeledDataset::new(e, vec![1, 1], None, 2, SplitTag::Train).unwrap();
        assert_eq!(a.content_hash(), a.clone().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
