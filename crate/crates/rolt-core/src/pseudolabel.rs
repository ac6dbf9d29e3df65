//! Soft pseudo-labels for detected-noisy examples. Guesses come from the
//! ERM head, the nearest-class-mean classifier, and the original label —
//! each read off temporally-ensembled (momentum) logits — and the guessed
//! classes receive fixed prior masses with the remainder smoothed over the
//! non-guessed classes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoltError};
use crate::model::one_hot;

/// Prior probability that each guesser matches the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuessPriors {
    pub p_erm: f64,
    pub p_ncm: f64,
    pub p_orig: f64,
}

impl Default for GuessPriors {
    fn default() -> Self {
        Self {
            p_erm: 0.4,
            p_ncm: 0.2,
            p_orig: 0.2,
        }
    }
}

impl GuessPriors {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p_erm, self.p_ncm, self.p_orig];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(RoltError::InvalidConfig(
                "guess priors must lie in [0, 1]".into(),
            ));
        }
        if self.total() > 1.0 + 1e-12 {
            return Err(RoltError::InvalidConfig(format!(
                "guess priors sum to {} > 1",
                self.total()
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.p_erm + self.p_ncm + self.p_orig
    }
}

/// Per-example exponential moving average of logits,
/// `q(t) = alpha * q(t-1) + (1 - alpha) * z(t)`, where an example's first
/// observed logits are copied verbatim (no decay from the zero vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumLogits {
    pub q: Array2<f64>,
    pub alpha: f64,
    pub initialized: Vec<bool>,
}

impl MomentumLogits {
    pub fn new(examples: usize, class_count: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(RoltError::InvalidConfig(format!(
                "EMA coefficient must lie in [0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            q: Array2::zeros((examples, class_count)),
            alpha,
            initialized: vec![false; examples],
        })
    }

    /// Argmax class of an example's momentum logits (softmax is monotone,
    /// so the argmax of the logits is the argmax of the probabilities);
    /// ties resolve to the smaller index.
    pub fn guess(&self, example: usize) -> usize {
        let row = self.q.row(example);
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_val {
                best_val = v;
                best = k;
            }
        }
        best
    }
}

/// Fold a full matrix of fresh logits into the store, returning the new
/// store. Rows whose example was never updated before copy `z` directly.
pub fn update_momentum(store: &MomentumLogits, z: &Array2<f64>) -> Result<MomentumLogits> {
    if store.q.dim() != z.dim() {
        return Err(RoltError::DimensionMismatch(format!(
            "momentum store is {:?}, fresh logits are {:?}",
            store.q.dim(),
            z.dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(RoltError::InvalidTarget(
            "fresh logits contain a non-finite value".into(),
        ));
    }
    let mut next = store.clone();
    for i in 0..z.nrows() {
        if next.initialized[i] {
            let alpha = next.alpha;
            for (q, &fresh) in next.q.row_mut(i).iter_mut().zip(z.row(i).iter()) {
                *q = alpha * *q + (1.0 - alpha) * fresh;
            }
        } else {
            next.q.row_mut(i).assign(&z.row(i));
            next.initialized[i] = true;
        }
    }
    Ok(next)
}

/// A noisy example's guess set: the three guesses, retaining multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuessSet {
    pub erm: usize,
    pub ncm: usize,
    pub original: usize,
}

impl GuessSet {
    /// Distinct guessed classes, ascending.
    pub fn distinct(&self) -> Vec<usize> {
        let mut classes = vec![self.erm, self.ncm, self.original];
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

/// Soft pseudo-label on the probability simplex. `renormalized` marks the
/// degenerate case where every class was guessed and the leftover
/// smoothing mass had nowhere to go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub renormalized: bool,
}

/// Distribute prior mass over the guess set: each guessed class receives
/// the summed priors of the guesses naming it (coinciding guesses
/// reinforce), and the remaining `1 - total priors` spreads uniformly over
/// the classes nobody guessed. If every class is guessed the assigned
/// masses are renormalized to sum 1 instead.
pub fn soft_label(guesses: &GuessSet, priors: &GuessPriors, class_count: usize) -> Result<SoftLabel> {
    priors.validate()?;
    let distinct = guesses.distinct();
    if let Some(&worst) = distinct.last() {
        if worst >= class_count {
            return Err(RoltError::InvalidTarget(format!(
                "guess {worst} out of range for {class_count} classes"
            )));
        }
    }
    let mut probs = vec![0.0; class_count];
    probs[guesses.erm] += priors.p_erm;
    probs[guesses.ncm] += priors.p_ncm;
    probs[guesses.original] += priors.p_orig;
    let unguessed = class_count - distinct.len();
    if unguessed == 0 {
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            let uniform = 1.0 / class_count as f64;
            probs.iter_mut().for_each(|p| *p = uniform);
        } else {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        return Ok(SoftLabel {
            probs,
            renormalized: true,
        });
    }
    let smoothing = (1.0 - priors.total()) / unguessed as f64;
    let mut guessed = vec![false; class_count];
    for &g in &distinct {
        guessed[g] = true;
    }
    for (k, p) in probs.iter_mut().enumerate() {
        if !guessed[k] {
            *p = smoothing;
        }
    }
    Ok(SoftLabel {
        probs,
        renormalized: false,
    })
}

/// Targets for one epoch: one-hot original labels for clean examples,
/// guess-built soft labels for noisy ones, plus the per-example guesses
/// for diagnostics export.
#[derive(Debug, Clone)]
pub struct RelabelOutcome {
    pub targets: Array2<f64>,
    pub erm_guess: Vec<usize>,
    pub ncm_guess: Vec<usize>,
    pub renormalized: Vec<bool>,
}

pub fn relabel_noisy(
    clean_mask: &[bool],
    erm_store: &MomentumLogits,
    ncm_store: &MomentumLogits,
    priors: &GuessPriors,
    noisy_labels: &[usize],
    class_count: usize,
) -> Result<RelabelOutcome> {
    let n = noisy_labels.len();
    if clean_mask.len() != n || erm_store.q.nrows() != n || ncm_store.q.nrows() != n {
        return Err(RoltError::DimensionMismatch(
            "clean mask, stores, and labels must cover the same examples".into(),
        ));
    }
    let mut targets = one_hot(noisy_labels, class_count)?;
    let mut erm_guess = Vec::with_capacity(n);
    let mut ncm_guess = Vec::with_capacity(n);
    let mut renormalized = vec![false; n];
    for i in 0..n {
        let erm = erm_store.guess(i);
        let ncm = ncm_store.guess(i);
        erm_guess.push(erm);
        ncm_guess.push(ncm);
        if !clean_mask[i] {
            let label = soft_label(
                &GuessSet {
                    erm,
                    ncm,
                    original: noisy_labels[i],
                },
                priors,
                class_count,
            )?;
            renormalized[i] = label.renormalized;
            for (t, &p) in targets.row_mut(i).iter_mut().zip(&label.probs) {
                *t = p;
            }
        }
    }
    Ok(RelabelOutcome {
        targets,
        erm_guess,
        ncm_guess,
        renormalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn default_priors() -> GuessPriors {
        GuessPriors::default()
    }

    #[test]
    fn worked_example_two_guessers_coincide() {
        // erm = ncm = class index 1, original = class index 2, K = 5:
        // index 1 takes 0.4 + 0.2, index 2 takes 0.2, the remaining three
        // classes share 0.2.
        let label = soft_label(
            &GuessSet {
                erm: 1,
                ncm: 1,
                original: 2,
            },
            &default_priors(),
            5,
        )
        .unwrap();
        let third = 0.2 / 3.0;
        let expected = [third, 0.6, 0.2, third, third];
        for (got, want) in label.probs.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(!label.renormalized);
        assert!((label.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_agreement_concentrates_all_prior_mass() {
        let label = soft_label(
            &GuessSet {
                erm: 3,
                ncm: 3,
                original: 3,
            },
            &default_priors(),
            4,
        )
        .unwrap();
        assert!((label.probs[3] - 0.8).abs() < 1e-12);
        for k in 0..3 {
            assert!((label.probs[k] - 0.2 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_distinct_guesses_each_keep_their_prior() {
        let label = soft_label(
            &GuessSet {
                erm: 0,
                ncm: 2,
                original: 4,
            },
            &default_priors(),
            5,
        )
        .unwrap();
        assert!((label.probs[0] - 0.4).abs() < 1e-12);
        assert!((label.probs[2] - 0.2).abs() < 1e-12);
        assert!((label.probs[4] - 0.2).abs() < 1e-12);
        assert!((label.probs[1] - 0.1).abs() < 1e-12);
        assert!((label.probs[3] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn every_class_guessed_renormalizes() {
        // K = 3 with three distinct guesses: nowhere to smooth, so the
        // masses 0.4/0.2/0.2 rescale to 0.5/0.25/0.25.
        let label = soft_label(
            &GuessSet {
                erm: 0,
                ncm: 1,
                original: 2,
            },
            &default_priors(),
            3,
        )
        .unwrap();
        assert!(label.renormalized);
        assert!((label.probs[0] - 0.5).abs() < 1e-12);
        assert!((label.probs[1] - 0.25).abs() < 1e-12);
        assert!((label.probs[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn priors_summing_to_one_leave_no_smoothing_mass() {
        let priors = GuessPriors {
            p_erm: 0.5,
            p_ncm: 0.3,
            p_orig: 0.2,
        };
        let label = soft_label(
            &GuessSet {
                erm: 1,
                ncm: 1,
                original: 1,
            },
            &priors,
            2,
        )
        .unwrap();
        assert_eq!(label.probs, vec![0.0, 1.0]);
    }

    #[test]
    fn zero_priors_smooth_only_over_unguessed() {
        let priors = GuessPriors {
            p_erm: 0.0,
            p_ncm: 0.0,
            p_orig: 0.0,
        };
        let label = soft_label(
            &GuessSet {
                erm: 0,
                ncm: 1,
                original: 0,
            },
            &priors,
            4,
        )
        .unwrap();
        assert_eq!(label.probs, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn invalid_priors_rejected() {
        let too_big = GuessPriors {
            p_erm: 0.6,
            p_ncm: 0.3,
            p_orig: 0.2,
        };
        assert!(too_big.validate().is_err());
        let negative = GuessPriors {
            p_erm: -0.1,
            p_ncm: 0.2,
            p_orig: 0.2,
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn first_update_copies_fresh_logits() {
        // With the naive recurrence from a zero store, q would be 1.0 then
        // 1.9; the first-update rule gives 10 then 10.
        let store = MomentumLogits::new(1, 2, 0.9).unwrap();
        let z = array![[10.0, 0.0]];
        let once = update_momentum(&store, &z).unwrap();
        assert_eq!(once.q[(0, 0)], 10.0);
        assert!(once.initialized[0]);
        let twice = update_momentum(&once, &z).unwrap();
        assert_eq!(twice.q[(0, 0)], 10.0);
    }

    #[test]
    fn alpha_zero_tracks_fresh_logits_exactly() {
        let store = MomentumLogits::new(2, 2, 0.0).unwrap();
        let z1 = array![[1.0, 2.0], [3.0, 4.0]];
        let z2 = array![[-1.0, 0.5], [0.0, 0.0]];
        let s = update_momentum(&store, &z1).unwrap();
        let s = update_momentum(&s, &z2).unwrap();
        assert_eq!(s.q, z2);
    }

    #[test]
    fn ema_gap_shrinks_by_alpha_each_step() {
        let mut store = MomentumLogits::new(1, 1, 0.9).unwrap();
        store = update_momentum(&store, &array![[0.0]]).unwrap();
        let z = array![[1.0]];
        let mut gap = 1.0;
        for _ in 0..5 {
            store = update_momentum(&store, &z).unwrap();
            let new_gap = 1.0 - store.q[(0, 0)];
            assert!((new_gap - 0.9 * gap).abs() < 1e-12);
            gap = new_gap;
        }
    }

    #[test]
    fn hand_recurrence_three_steps() {
        let mut store = MomentumLogits::new(1, 1, 0.9).unwrap();
        for (z, want) in [(4.0, 4.0), (2.0, 0.9 * 4.0 + 0.1 * 2.0), (0.0, 0.9 * 3.8)] {
            store = update_momentum(&store, &array![[z]]).unwrap();
            assert!((store.q[(0, 0)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn guess_ties_break_to_smaller_class() {
        let mut store = MomentumLogits::new(1, 3, 0.9).unwrap();
        store = update_momentum(&store, &array![[2.0, 5.0, 5.0]]).unwrap();
        assert_eq!(store.guess(0), 1);
    }

    #[test]
    fn all_clean_split_keeps_one_hot_originals() {
        let labels = [0usize, 2, 1];
        let erm = update_momentum(
            &MomentumLogits::new(3, 3, 0.9).unwrap(),
            &array![[9.0, 0.0, 0.0], [9.0, 0.0, 0.0], [9.0, 0.0, 0.0]],
        )
        .unwrap();
        let out = relabel_noisy(&[true; 3], &erm, &erm, &default_priors(), &labels, 3).unwrap();
        assert_eq!(out.targets, one_hot(&labels, 3).unwrap());
        assert_eq!(out.erm_guess, vec![0, 0, 0]);
    }

    #[test]
    fn single_noisy_example_gets_exactly_one_soft_row() {
        let labels = [0usize, 1];
        let erm = update_momentum(
            &MomentumLogits::new(2, 3, 0.9).unwrap(),
            &array![[9.0, 0.0, 0.0], [0.0, 0.0, 9.0]],
        )
        .unwrap();
        let out = relabel_noisy(
            &[true, false],
            &erm,
            &erm,
            &default_priors(),
            &labels,
            3,
        )
        .unwrap();
        assert_eq!(out.targets.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        // Noisy example: erm = ncm = 2, original = 1 -> 0.6 on 2, 0.2 on 1,
        // 0.2 smoothed onto the single unguessed class 0.
        let row = out.targets.row(1);
        assert!((row[2] - 0.6).abs() < 1e-12);
        assert!((row[1] - 0.2).abs() < 1e-12);
        assert!((row[0] - 0.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn soft_labels_stay_on_the_simplex(
            k in 2usize..12,
            erm_raw in 0usize..12,
            ncm_raw in 0usize..12,
            orig_raw in 0usize..12,
            p_erm in 0.0f64..0.5,
            p_ncm in 0.0f64..0.3,
            p_orig in 0.0f64..0.2,
        ) {
            let guesses = GuessSet {
                erm: erm_raw % k,
                ncm: ncm_raw % k,
                original: orig_raw % k,
            };
            let priors = GuessPriors { p_erm, p_ncm, p_orig };
            let label = soft_label(&guesses, &priors, k).unwrap();
            prop_assert!(label.probs.iter().all(|&p| p >= 0.0));
            prop_assert!((label.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if !label.renormalized {
                // Mass accounting: guessed classes hold exactly the prior sum.
                let guessed_mass: f64 = guesses
                    .distinct()
                    .iter()
                    .map(|&g| label.probs[g])
                    .sum();
                prop_assert!((guessed_mass - priors.total()).abs() < 1e-12);
            }
        }

        #[test]
        fn ema_is_linear_and_argmax_shift_invariant(
            q0 in proptest::collection::vec(-5.0f64..5.0, 3),
            z in proptest::collection::vec(-5.0f64..5.0, 3),
            scale in 0.1f64..10.0,
            shift in -20.0f64..20.0,
        ) {
            let base = MomentumLogits {
                q: Array2::from_shape_vec((1, 3), q0.clone()).unwrap(),
                alpha: 0.9,
                initialized: vec![true],
            };
            let zmat = Array2::from_shape_vec((1, 3), z.clone()).unwrap();
            let plain = update_momentum(&base, &zmat).unwrap();
            // Positive scaling of store and logits scales q identically.
            let scaled_base = MomentumLogits {
                q: base.q.mapv(|v| v * scale),
                alpha: 0.9,
                initialized: vec![true],
            };
            let scaled = update_momentum(&scaled_base, &zmat.mapv(|v| v * scale)).unwrap();
            for (a, b) in plain.q.iter().zip(scaled.q.iter()) {
                prop_assert!((a * scale - b).abs() < 1e-9);
            }
            // Adding a constant to every class of z leaves the argmax alone.
            let shifted = update_momentum(&base, &zmat.mapv(|v| v + shift)).unwrap();
            prop_assert_eq!(plain.guess(0), shifted.guess(0));
        }
    }
}
