//! Metrics and baselines: balanced accuracy with per-class recalls,
//! many/medium/few class grouping, clean-selection precision/recall against
//! ground truth, confusion matrices, and a small-loss detector (a global
//! mixture fit on per-example losses) for head-to-head comparison.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Result, RoltError};
use crate::gmm::{clean_flags, fit_gmm2};

/// Count thresholds for the default shot grouping: a class is "many" above
/// this count...
pub const DEFAULT_MANY_OVER: usize = 100;
/// ...and "few" below this one; everything between is "medium".
pub const DEFAULT_FEW_UNDER: usize = 20;

/// Balanced accuracy = mean per-class recall. Classes absent from the
/// label set are excluded from the mean and listed so callers can warn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub balanced: f64,
    pub micro: f64,
    /// Recall per class; `NaN` for classes with no test examples.
    pub per_class_recall: Vec<f64>,
    pub absent_classes: Vec<usize>,
}

pub fn balanced_accuracy(
    predictions: &[usize],
    labels: &[usize],
    class_count: usize,
) -> Result<BalancedAccuracy> {
    if predictions.len() != labels.len() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(RoltError::InvalidDataset("empty evaluation set".into()));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&v| v >= class_count) {
        return Err(RoltError::InvalidTarget(format!(
            "class {bad} out of range for {class_count} classes"
        )));
    }
    let mut totals = vec![0usize; class_count];
    let mut hits = vec![0usize; class_count];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let mut per_class_recall = vec![f64::NAN; class_count];
    let mut absent_classes = Vec::new();
    let mut balanced = 0.0;
    let mut present = 0usize;
    for k in 0..class_count {
        if totals[k] == 0 {
            absent_classes.push(k);
        } else {
            per_class_recall[k] = hits[k] as f64 / totals[k] as f64;
            balanced += per_class_recall[k];
            present += 1;
        }
    }
    balanced /= present as f64;
    let micro = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok(BalancedAccuracy {
        balanced,
        micro,
        per_class_recall,
        absent_classes,
    })
}

/// Population standard deviation over the finite entries (absent-class
/// `NaN`s are skipped). The balance diagnostic for per-class recalls.
pub fn recall_std(recalls: &[f64]) -> f64 {
    let finite: Vec<f64> = recalls.iter().copied().filter(|r| r.is_finite()).collect();
    if finite.is_empty() {
        return f64::NAN;
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let var = finite.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / finite.len() as f64;
    var.sqrt()
}

/// Disjoint, exhaustive grouping of classes by training-set size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSplit {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
    /// `(many_over, few_under)` when built by count thresholds; `None` for
    /// explicit index lists.
    pub thresholds: Option<(usize, usize)>,
}

impl ShotSplit {
    /// Explicit index-list mode; the three lists must partition `0..K`.
    pub fn from_indices(
        many: Vec<usize>,
        medium: Vec<usize>,
        few: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let mut seen = vec![0usize; class_count];
        for &k in many.iter().chain(&medium).chain(&few) {
            if k >= class_count {
                return Err(RoltError::InvalidConfig(format!(
                    "shot-split class {k} out of range for {class_count} classes"
                )));
            }
            seen[k] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(RoltError::InvalidConfig(
                "shot-split buckets must partition the class set".into(),
            ));
        }
        Ok(Self {
            many,
            medium,
            few,
            thresholds: None,
        })
    }
}

/// Group classes by count: many above `many_over`, few below `few_under`,
/// medium in `[few_under, many_over]`.
pub fn shot_split(counts: &[usize], many_over: usize, few_under: usize) -> Result<ShotSplit> {
    if few_under > many_over {
        return Err(RoltError::InvalidConfig(format!(
            "few threshold {few_under} exceeds many threshold {many_over}"
        )));
    }
    let mut split = ShotSplit {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
        thresholds: Some((many_over, few_under)),
    };
    for (k, &c) in counts.iter().enumerate() {
        if c > many_over {
            split.many.push(k);
        } else if c < few_under {
            split.few.push(k);
        } else {
            split.medium.push(k);
        }
    }
    Ok(split)
}

/// Mean per-class recall inside each shot bucket (`NaN` entries skipped;
/// `NaN` for an empty bucket).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotRecalls {
    pub many: f64,
    pub medium: f64,
    pub few: f64,
}

pub fn split_recalls(per_class_recall: &[f64], split: &ShotSplit) -> ShotRecalls {
    let mean_of = |classes: &[usize]| {
        let vals: Vec<f64> = classes
            .iter()
            .filter_map(|&k| per_class_recall.get(k).copied())
            .filter(|r| r.is_finite())
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    ShotRecalls {
        many: mean_of(&split.many),
        medium: mean_of(&split.medium),
        few: mean_of(&split.few),
    }
}

/// Precision/recall of a clean-selection mask against ground truth, where
/// an example is truly clean iff its observed label matches its true one.
/// An empty selection has undefined precision; it is reported as 0 with
/// `empty_selection` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    /// |X|: examples flagged clean.
    pub selected: usize,
    /// |{i in X : y_i = y*_i}|.
    pub selected_correct: usize,
    /// |{i : y_i = y*_i}| over the scored examples.
    pub clean_total: usize,
    pub empty_selection: bool,
}

pub fn detection_scores(clean_mask: &[bool], dataset: &LabeledDataset) -> Result<DetectionScore> {
    let all: Vec<usize> = (0..dataset.class_count).collect();
    detection_scores_for_classes(clean_mask, dataset, &all)
}

/// [`detection_scores`] restricted to examples whose observed label lies in
/// `classes` (shot-split variants).
pub fn detection_scores_for_classes(
    clean_mask: &[bool],
    dataset: &LabeledDataset,
    classes: &[usize],
) -> Result<DetectionScore> {
    let truth = dataset
        .true_labels
        .as_ref()
        .ok_or_else(|| RoltError::MissingGroundTruth("detection scoring".into()))?;
    if clean_mask.len() != dataset.len() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} mask entries vs {} examples",
            clean_mask.len(),
            dataset.len()
        )));
    }
    let mut in_scope = vec![false; dataset.class_count];
    for &k in classes {
        if k >= dataset.class_count {
            return Err(RoltError::InvalidConfig(format!(
                "class {k} out of range for {} classes",
                dataset.class_count
            )));
        }
        in_scope[k] = true;
    }
    let mut selected = 0usize;
    let mut selected_correct = 0usize;
    let mut clean_total = 0usize;
    for i in 0..dataset.len() {
        if !in_scope[dataset.noisy_labels[i]] {
            continue;
        }
        let truly_clean = dataset.noisy_labels[i] == truth[i];
        if truly_clean {
            clean_total += 1;
        }
        if clean_mask[i] {
            selected += 1;
            if truly_clean {
                selected_correct += 1;
            }
        }
    }
    let empty_selection = selected == 0;
    Ok(DetectionScore {
        precision: if empty_selection {
            0.0
        } else {
            selected_correct as f64 / selected as f64
        },
        recall: if clean_total == 0 {
            0.0
        } else {
            selected_correct as f64 / clean_total as f64
        },
        selected,
        selected_correct,
        clean_total,
        empty_selection,
    })
}

/// Per-class clean-selection recall, grouped by observed label; `NaN` for
/// classes with no truly-clean members.
pub fn per_class_clean_recall(
    clean_mask: &[bool],
    dataset: &LabeledDataset,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dataset.class_count);
    for k in 0..dataset.class_count {
        let score = detection_scores_for_classes(clean_mask, dataset, &[k])?;
        out.push(if score.clean_total == 0 {
            f64::NAN
        } else {
            score.recall
        });
    }
    Ok(out)
}

/// How the small-loss detector pools losses before the mixture fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFitMode {
    /// One fit over all examples (the usual small-loss trick).
    Global,
    /// One fit per observed class (ablation isolating class-independence).
    PerClass,
}

/// Small-loss baseline: fit a two-component mixture to per-example losses
/// and call the lower-loss component clean.
pub fn small_loss_baseline(
    losses: &[f64],
    labels: &[usize],
    class_count: usize,
    mode: LossFitMode,
) -> Result<Vec<bool>> {
    if losses.len() != labels.len() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} losses vs {} labels",
            losses.len(),
            labels.len()
        )));
    }
    match mode {
        LossFitMode::Global => {
            let fit = fit_gmm2(losses)?;
            Ok(clean_flags(losses, &fit))
        }
        LossFitMode::PerClass => {
            let mut mask = vec![false; losses.len()];
            let mut members = vec![Vec::new(); class_count];
            for (i, &y) in labels.iter().enumerate() {
                if y >= class_count {
                    return Err(RoltError::InvalidTarget(format!(
                        "label {y} out of range for {class_count} classes"
                    )));
                }
                members[y].push(i);
            }
            for indices in &members {
                if indices.is_empty() {
                    continue;
                }
                let class_losses: Vec<f64> = indices.iter().map(|&i| losses[i]).collect();
                let fit = fit_gmm2(&class_losses)?;
                for (&i, c) in indices.iter().zip(clean_flags(&class_losses, &fit)) {
                    mask[i] = c;
                }
            }
            Ok(mask)
        }
    }
}

/// `K x K` count matrix with rows indexed by true class and columns by
/// predicted class.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    class_count: usize,
) -> Result<Array2<usize>> {
    if predictions.len() != labels.len() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&v| v >= class_count) {
        return Err(RoltError::InvalidTarget(format!(
            "class {bad} out of range for {class_count} classes"
        )));
    }
    let mut m = Array2::zeros((class_count, class_count));
    for (&p, &y) in predictions.iter().zip(labels) {
        m[(y, p)] += 1;
    }
    Ok(m)
}
