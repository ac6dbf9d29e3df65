//! Prototypical noise detection: per class, fit a two-component mixture to
//! the squared distances between members and their class prototype, call
//! the near mode clean, then optionally rebuild prototypes from the clean
//! subset and split again.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::Result;
use crate::gmm::{clean_flags, fit_gmm2, GmmFit};
use crate::prototypes::{compute_prototypes, own_class_distances, Prototypes};

/// Classes smaller than this keep all their examples; a mixture fit on a
/// handful of distances is noise, not signal.
pub const MIN_CLASS_FIT: usize = 5;

/// Split evidence for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub class: usize,
    /// Dataset indices of the members (ascending).
    pub indices: Vec<usize>,
    /// Squared distance of each member to the class prototype.
    pub distances: Vec<f64>,
    /// Near-mode membership, aligned with `indices`.
    pub clean: Vec<bool>,
    /// `None` when the class was under [`MIN_CLASS_FIT`] (kept whole).
    pub fit: Option<GmmFit>,
}

/// Full detector output after the final refinement round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub clean_mask: Vec<bool>,
    pub prototypes: Prototypes,
    pub per_class: Vec<ClassDetection>,
    pub rounds: usize,
}

impl DetectionResult {
    pub fn clean_count(&self) -> usize {
        self.clean_mask.iter().filter(|&&c| c).count()
    }

    /// Dataset indices currently flagged clean, ascending.
    pub fn clean_indices(&self) -> Vec<usize> {
        (0..self.clean_mask.len())
            .filter(|&i| self.clean_mask[i])
            .collect()
    }

    /// Dataset indices currently flagged noisy, ascending.
    pub fn noisy_indices(&self) -> Vec<usize> {
        (0..self.clean_mask.len())
            .filter(|&i| !self.clean_mask[i])
            .collect()
    }

    /// Per-class partition `(X_k, S_k)`; within each class the two lists
    /// are disjoint and together cover exactly the class members.
    pub fn class_split(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut clean = Vec::with_capacity(self.per_class.len());
        let mut noisy = Vec::with_capacity(self.per_class.len());
        for pc in &self.per_class {
            let mut x = Vec::new();
            let mut s = Vec::new();
            for (&i, &c) in pc.indices.iter().zip(&pc.clean) {
                if c {
                    x.push(i);
                } else {
                    s.push(i);
                }
            }
            clean.push(x);
            noisy.push(s);
        }
        (clean, noisy)
    }
}

fn split_once(
    dataset: &LabeledDataset,
    protos: &Prototypes,
) -> Result<(Vec<ClassDetection>, Vec<bool>)> {
    let distances = own_class_distances(
        &dataset.embeddings.view(),
        &dataset.noisy_labels,
        protos,
    )?;
    let mut per_class = Vec::with_capacity(dataset.class_count);
    let mut mask = vec![false; dataset.len()];
    for (class, indices) in dataset.class_index_sets().into_iter().enumerate() {
        let class_distances: Vec<f64> = indices.iter().map(|&i| distances[i]).collect();
        let (fit, clean) = if indices.len() < MIN_CLASS_FIT {
            (None, vec![true; indices.len()])
        } else {
            let fit = fit_gmm2(&class_distances)?;
            let clean = clean_flags(&class_distances, &fit);
            (Some(fit), clean)
        };
        for (&i, &c) in indices.iter().zip(&clean) {
            mask[i] = c;
        }
        per_class.push(ClassDetection {
            class,
            indices,
            distances: class_distances,
            clean,
            fit,
        });
    }
    Ok((per_class, mask))
}

/// Run the detector: initial prototypes from all labeled members, a
/// mixture split per class, then `rounds` refinements where prototypes are
/// recomputed from the currently-clean subset (falling back to the
/// previous prototype for classes that lose every member) and the split is
/// redone.
pub fn detect(dataset: &LabeledDataset, rounds: usize) -> Result<DetectionResult> {
    let protos = compute_prototypes(
        &dataset.embeddings.view(),
        &dataset.noisy_labels,
        dataset.class_count,
        None,
    )?;
    detect_from(dataset, protos, rounds)
}

/// [`detect`] with caller-supplied starting prototypes.
pub fn detect_from(
    dataset: &LabeledDataset,
    initial: Prototypes,
    rounds: usize,
) -> Result<DetectionResult> {
    let mut protos = initial;
    let (mut per_class, mut mask) = split_once(dataset, &protos)?;
    for _ in 0..rounds {
        let kept: Vec<usize> = (0..dataset.len()).filter(|&i| mask[i]).collect();
        let kept_embeddings = dataset.embeddings.select(Axis(0), &kept);
        let kept_labels: Vec<usize> = kept.iter().map(|&i| dataset.noisy_labels[i]).collect();
        protos = compute_prototypes(
            &kept_embeddings.view(),
            &kept_labels,
            dataset.class_count,
            Some(&protos),
        )?;
        let next = split_once(dataset, &protos)?;
        per_class = next.0;
        mask = next.1;
    }
    Ok(DetectionResult {
        clean_mask: mask,
        prototypes: protos,
        per_class,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitTag;
    use crate::datasim::blobs_from_centers;
    use crate::prototypes::prototype_angles_deg;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two well-separated blobs with a known set of labels swapped in each
    /// direction, so both classes carry a bimodal distance distribution.
    fn planted_noise_case(seed: u64) -> LabeledDataset {
        let mut centers = Array2::zeros((2, 4));
        centers[(0, 0)] = 12.0;
        centers[(1, 0)] = -12.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean =
            blobs_from_centers(&centers, &[60, 60], 0.25, SplitTag::Train, &mut rng).unwrap();
        let mut noisy_labels = clean.noisy_labels.clone();
        for i in (0..120).step_by(10) {
            noisy_labels[i] = 1 - noisy_labels[i]; // 6 flips per class
        }
        LabeledDataset::new(
            clean.embeddings.clone(),
            noisy_labels,
            clean.true_labels.clone(),
            2,
            SplitTag::Train,
        )
        .unwrap()
    }

    #[test]
    fn flags_exactly_the_planted_flips() {
        let ds = planted_noise_case(31);
        let result = detect(&ds, 1).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        for i in 0..ds.len() {
            let actually_clean = ds.noisy_labels[i] == truth[i];
            assert_eq!(
                result.clean_mask[i], actually_clean,
                "example {i}: mask {} vs truth {}",
                result.clean_mask[i], actually_clean
            );
        }
    }

    #[test]
    fn refinement_tightens_prototypes() {
        let ds = planted_noise_case(8);
        let initial = detect(&ds, 0).unwrap();
        let refined = detect(&ds, 1).unwrap();
        let mut reference = Array2::zeros((2, 4));
        reference[(0, 0)] = 1.0;
        reference[(1, 0)] = -1.0;
        let before = prototype_angles_deg(&initial.prototypes, &reference).unwrap();
        let after = prototype_angles_deg(&refined.prototypes, &reference).unwrap();
        // Class 1's prototype was contaminated by the flipped points; after
        // refinement it must move toward the true direction.
        assert!(after[1] <= before[1] + 1e-9, "{after:?} vs {before:?}");
        assert!(after.iter().all(|&a| a < 5.0), "{after:?}");
    }

    #[test]
    fn small_classes_are_kept_whole() {
        let mut centers = Array2::zeros((2, 3));
        centers[(0, 0)] = 5.0;
        centers[(1, 1)] = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = blobs_from_centers(&centers, &[20, 4], 1.0, SplitTag::Train, &mut rng).unwrap();
        let result = detect(&ds, 1).unwrap();
        let class1 = &result.per_class[1];
        assert_eq!(class1.indices.len(), 4);
        assert!(class1.fit.is_none());
        assert!(class1.clean.iter().all(|&c| c));
    }

    #[test]
    fn rounds_are_recorded_and_zero_rounds_skips_refinement() {
        let ds = planted_noise_case(5);
        let r0 = detect(&ds, 0).unwrap();
        let r2 = detect(&ds, 2).unwrap();
        assert_eq!(r0.rounds, 0);
        assert_eq!(r2.rounds, 2);
    }

    #[test]
    fn detection_is_deterministic() {
        let ds = planted_noise_case(13);
        let a = detect(&ds, 1).unwrap();
        let b = detect(&ds, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_with_no_members_uses_fallback_prototype() {
        // Three declared classes but labels only use 0 and 1.
        let mut centers = Array2::zeros((2, 3));
        centers[(0, 0)] = 6.0;
        centers[(1, 1)] = 6.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let two = blobs_from_centers(&centers, &[30, 30], 1.0, SplitTag::Train, &mut rng).unwrap();
        let ds = LabeledDataset::new(
            two.embeddings.clone(),
            two.noisy_labels.clone(),
            None,
            3,
            SplitTag::Train,
        )
        .unwrap();
        let result = detect(&ds, 1).unwrap();
        assert!(result.prototypes.fallback_classes.contains(&2));
        assert!(result.per_class[2].indices.is_empty());
        assert_eq!(result.clean_mask.len(), 60);
    }

    #[test]
    fn single_class_dataset_never_crashes() {
        let mut centers = Array2::zeros((1, 3));
        centers[(0, 0)] = 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = blobs_from_centers(&centers, &[40], 1.0, SplitTag::Train, &mut rng).unwrap();
        let result = detect(&ds, 1).unwrap();
        assert_eq!(result.clean_mask.len(), 40);
        let (clean, noisy) = result.class_split();
        assert_eq!(clean[0].len() + noisy[0].len(), 40);
    }

    #[test]
    fn partition_covers_every_example_once() {
        let ds = planted_noise_case(77);
        let result = detect(&ds, 1).unwrap();
        let mut seen = vec![0usize; ds.len()];
        for pc in &result.per_class {
            assert_eq!(pc.indices.len(), pc.distances.len());
            assert_eq!(pc.indices.len(), pc.clean.len());
            for &i in &pc.indices {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}
