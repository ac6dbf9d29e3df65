//! Two-component one-dimensional Gaussian mixture fitted by EM, used to
//! separate small prototype distances (clean labels) from large ones
//! (corrupted labels). Everything is deterministic: initialization comes
//! from sample percentiles, not random restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RoltError};

const MAX_ITERS: usize = 100;
const LL_TOL: f64 = 1e-6;

/// Fitted mixture. Components are ordered so `means[0] <= means[1]`;
/// component 0 is the "near" (clean) mode. A `degenerate` fit means the
/// sample was too small or constant, in which case the parameters collapse
/// onto the sample itself and every point is treated as near.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub stds: [f64; 2],
    pub weights: [f64; 2],
    pub log_likelihood: f64,
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
}

impl GmmFit {
    /// Unweighted component log-densities at `x`.
    pub fn component_log_densities(&self, x: f64) -> [f64; 2] {
        [
            log_normal_pdf(x, self.means[0], self.stds[0]),
            log_normal_pdf(x, self.means[1], self.stds[1]),
        ]
    }

    /// A point is near iff the low-mean component's density strictly
    /// exceeds the high-mean component's (mixture weights deliberately
    /// ignored so a dominant noisy mode cannot swallow the clean one).
    /// Degenerate fits call everything near.
    pub fn is_near(&self, x: f64) -> bool {
        if self.degenerate {
            return true;
        }
        let [lo, hi] = self.component_log_densities(x);
        lo > hi
    }
}

fn log_normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - std.ln() - 0.5 * z * z
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn population_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn degenerate_fit(samples: &[f64]) -> GmmFit {
    let value = samples.first().copied().unwrap_or(0.0);
    GmmFit {
        means: [value, value],
        stds: [1e-4, 1e-4],
        weights: [0.5, 0.5],
        log_likelihood: 0.0,
        ll_trace: vec![],
        iterations: 0,
        converged: false,
        degenerate: true,
    }
}

/// Compensated (Kahan) sum; keeps the likelihood trace's rounding noise
/// near one ulp so monotonicity checks can use a tight tolerance.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// EM fit of a two-component mixture. Initialization: means at the 10th
/// and 90th sample percentiles (min/max if those coincide), both stds at
/// the sample std, equal weights. Stds are floored at `1e-4 * sample_std`
/// so a component cannot collapse onto a single point. Runs until the
/// log-likelihood improves by less than `1e-6` or 100 iterations.
///
/// All EM arithmetic runs over the *sorted* sample, so any permutation of
/// the input yields a bitwise-identical fit.
pub fn fit_gmm2(samples: &[f64]) -> Result<GmmFit> {
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(RoltError::InvalidDataset(
            "mixture input contains a non-finite value".into(),
        ));
    }
    if samples.len() < 2 {
        return Ok(degenerate_fit(samples));
    }
    let mut data = samples.to_vec();
    data.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (min, max) = (data[0], data[data.len() - 1]);
    if min == max {
        return Ok(degenerate_fit(samples));
    }

    let spread = population_std(&data);
    let std_floor = 1e-4 * (spread + 1e-12);
    let mut mu = [percentile(&data, 0.1), percentile(&data, 0.9)];
    if mu[1] - mu[0] <= 1e-9 * (spread + 1e-12) {
        mu = [min, max];
    }
    let mut sigma = [spread.max(std_floor); 2];
    let mut phi = [0.5f64; 2];

    let n = data.len();
    let mut resp = vec![[0.0f64; 2]; n];
    let log_likelihood = |mu: &[f64; 2], sigma: &[f64; 2], phi: &[f64; 2]| -> f64 {
        kahan_sum(data.iter().map(|&x| {
            let a = phi[0].ln() + log_normal_pdf(x, mu[0], sigma[0]);
            let b = phi[1].ln() + log_normal_pdf(x, mu[1], sigma[1]);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        }))
    };

    let mut ll_prev = log_likelihood(&mu, &sigma, &phi);
    let mut ll_trace = vec![ll_prev];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        // E-step: per-sample responsibilities, normalized in log space.
        for (i, &x) in data.iter().enumerate() {
            let a = phi[0].ln() + log_normal_pdf(x, mu[0], sigma[0]);
            let b = phi[1].ln() + log_normal_pdf(x, mu[1], sigma[1]);
            let m = a.max(b);
            let ea = (a - m).exp();
            let eb = (b - m).exp();
            let z = ea + eb;
            resp[i] = [ea / z, eb / z];
        }
        // M-step.
        for j in 0..2 {
            let total = kahan_sum(resp.iter().map(|r| r[j])).max(1e-300);
            let mean = kahan_sum(data.iter().zip(&resp).map(|(&x, r)| r[j] * x)) / total;
            let var = kahan_sum(
                data.iter()
                    .zip(&resp)
                    .map(|(&x, r)| r[j] * (x - mean) * (x - mean)),
            ) / total;
            mu[j] = mean;
            sigma[j] = var.sqrt().max(std_floor);
            phi[j] = total / n as f64;
        }
        let ll = log_likelihood(&mu, &sigma, &phi);
        ll_trace.push(ll);
        if ll - ll_prev < LL_TOL {
            converged = true;
            ll_prev = ll;
            break;
        }
        ll_prev = ll;
    }

    // Order components by mean so index 0 is always the near mode.
    if mu[0] > mu[1] {
        mu.swap(0, 1);
        sigma.swap(0, 1);
        phi.swap(0, 1);
    }
    Ok(GmmFit {
        means: mu,
        stds: sigma,
        weights: phi,
        log_likelihood: ll_prev,
        ll_trace,
        iterations,
        converged,
        degenerate: false,
    })
}

/// Near/far flag per sample under [`GmmFit::is_near`].
pub fn clean_flags(samples: &[f64], fit: &GmmFit) -> Vec<bool> {
    samples.iter().map(|&x| fit.is_near(x)).collect()
}

/// Draw from a known two-component mixture; test and benchmark oracle.
pub fn sample_mixture(
    means: [f64; 2],
    stds: [f64; 2],
    weights: [f64; 2],
    n: usize,
    seed: u64,
) -> Vec<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let comp: Vec<Normal<f64>> = (0..2)
        .map(|j| Normal::new(means[j], stds[j]).expect("valid component"))
        .collect();
    (0..n)
        .map(|_| {
            let j = usize::from(rng.random_range(0.0..1.0) >= weights[0]);
            comp[j].sample(&mut rng)
        })
        .collect()
}

/// Allowed downward slack when asserting a non-decreasing likelihood
/// trace: exact EM is monotone; the compensated sums leave only ulp-scale
/// rounding on top.
pub fn ll_slack(ll: f64) -> f64 {
    1e-9 + 1e-12 * ll.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn percentile_interpolates_linearly() {
        let s = [0.0, 10.0];
        assert_eq!(percentile(&s, 0.0), 0.0);
        assert_eq!(percentile(&s, 0.3), 3.0);
        assert_eq!(percentile(&s, 1.0), 10.0);
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&t, 0.5), 3.0);
        assert_eq!(percentile(&t, 0.25), 2.0);
    }

    #[test]
    fn recovers_well_separated_mixture() {
        let samples = sample_mixture([0.0, 10.0], [1.0, 1.0], [0.5, 0.5], 10_000, 7);
        let fit = fit_gmm2(&samples).unwrap();
        assert!(!fit.degenerate);
        assert!(fit.converged);
        assert!((fit.means[0] - 0.0).abs() < 0.1, "{:?}", fit.means);
        assert!((fit.means[1] - 10.0).abs() < 0.1, "{:?}", fit.means);
        assert!((fit.stds[0] - 1.0).abs() < 0.15);
        assert!((fit.stds[1] - 1.0).abs() < 0.15);
        assert!((fit.weights[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn exactly_bimodal_point_masses_recovered_tightly() {
        // 500 copies each of 0.1 and 5.0: EM must lock onto the two point
        // masses with equal weights.
        let mut samples = vec![0.1; 500];
        samples.extend(vec![5.0; 500]);
        let fit = fit_gmm2(&samples).unwrap();
        assert!((fit.means[0] - 0.1).abs() < 1e-3, "{:?}", fit.means);
        assert!((fit.means[1] - 5.0).abs() < 1e-3, "{:?}", fit.means);
        assert!((fit.weights[0] - 0.5).abs() < 1e-3);
        assert!((fit.weights[1] - 0.5).abs() < 1e-3);
        let flags = clean_flags(&samples, &fit);
        assert!(flags[..500].iter().all(|&c| c));
        assert!(flags[500..].iter().all(|&c| !c));
    }

    #[test]
    fn recovers_tight_asymmetric_mixture_within_five_hundredths() {
        let samples = sample_mixture([1.0, 4.0], [0.2, 0.3], [0.7, 0.3], 10_000, 19);
        let fit = fit_gmm2(&samples).unwrap();
        assert!((fit.means[0] - 1.0).abs() < 0.05);
        assert!((fit.means[1] - 4.0).abs() < 0.05);
        assert!((fit.stds[0] - 0.2).abs() < 0.05);
        assert!((fit.stds[1] - 0.3).abs() < 0.05);
        assert!((fit.weights[0] - 0.7).abs() < 0.05);
        assert!((fit.weights[1] - 0.3).abs() < 0.05);
    }

    #[test]
    fn fit_is_permutation_invariant_bitwise() {
        let forward = sample_mixture([0.0, 6.0], [1.0, 1.2], [0.6, 0.4], 997, 13);
        let mut scrambled = forward.clone();
        scrambled.reverse();
        scrambled.swap(3, 800);
        scrambled.swap(0, 400);
        let a = fit_gmm2(&forward).unwrap();
        let b = fit_gmm2(&scrambled).unwrap();
        assert_eq!(a, b);
        // Flags permute exactly with the input: apply the same
        // reverse-then-swap scramble to the forward flags.
        let fa = clean_flags(&forward, &a);
        let fb = clean_flags(&scrambled, &b);
        let mut expect = fa.clone();
        expect.reverse();
        expect.swap(3, 800);
        expect.swap(0, 400);
        assert_eq!(fb, expect);
    }

    #[test]
    fn recovers_skewed_weights_and_orders_components() {
        let samples = sample_mixture([6.0, 0.0], [1.0, 0.5], [0.1, 0.9], 20_000, 3);
        let fit = fit_gmm2(&samples).unwrap();
        assert!(fit.means[0] < fit.means[1]);
        assert!((fit.means[0] - 0.0).abs() < 0.1);
        assert!((fit.means[1] - 6.0).abs() < 0.2);
        assert!((fit.weights[0] - 0.9).abs() < 0.05);
        assert!((fit.weights[1] - 0.1).abs() < 0.05);
    }

    #[test]
    fn likelihood_trace_never_drops() {
        let samples = sample_mixture([1.0, 4.0], [0.7, 1.3], [0.6, 0.4], 5_000, 11);
        let fit = fit_gmm2(&samples).unwrap();
        for w in fit.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - ll_slack(w[0]), "{} -> {}", w[0], w[1]);
        }
        assert_eq!(*fit.ll_trace.last().unwrap(), fit.log_likelihood);
    }

    #[test]
    fn tiny_or_constant_samples_degenerate_to_all_near() {
        for samples in [vec![], vec![3.0], vec![2.0; 50]] {
            let fit = fit_gmm2(&samples).unwrap();
            assert!(fit.degenerate);
            assert!(!fit.converged);
            assert!(clean_flags(&samples, &fit).iter().all(|&c| c));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(matches!(
            fit_gmm2(&[1.0, f64::NAN]),
            Err(RoltError::InvalidDataset(_))
        ));
    }

    fn manual_fit(means: [f64; 2], stds: [f64; 2], weights: [f64; 2]) -> GmmFit {
        GmmFit {
            means,
            stds,
            weights,
            log_likelihood: 0.0,
            ll_trace: vec![],
            iterations: 0,
            converged: true,
            degenerate: false,
        }
    }

    #[test]
    fn equal_std_boundary_is_the_midpoint() {
        // With equal stds the densities cross exactly halfway between the
        // means, independent of the mixture weights.
        for weights in [[0.5, 0.5], [0.9, 0.1], [0.1, 0.9]] {
            let fit = manual_fit([0.0, 4.0], [1.0, 1.0], weights);
            assert!(fit.is_near(1.9));
            assert!(!fit.is_near(2.1));
            // Exactly on the boundary the comparison is strict: not near.
            assert!(!fit.is_near(2.0));
        }
    }

    #[test]
    fn split_ignores_mixture_weights() {
        // A 95%-weight far mode must not absorb points nearer the low mean.
        let fit = manual_fit([0.0, 4.0], [1.0, 1.0], [0.05, 0.95]);
        let flags = clean_flags(&[0.5, 1.5, 3.0, 4.5], &fit);
        assert_eq!(flags, vec![true, true, false, false]);
    }

    #[test]
    fn fit_is_deterministic() {
        let samples = sample_mixture([0.0, 5.0], [1.0, 1.0], [0.5, 0.5], 3_000, 21);
        let a = fit_gmm2(&samples).unwrap();
        let b = fit_gmm2(&samples).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_matches_requested_moments() {
        let samples = sample_mixture([0.0, 10.0], [1.0, 2.0], [0.3, 0.7], 50_000, 5);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!((mean - 7.0).abs() < 0.1, "mean {mean}");
        let a = sample_mixture([0.0, 10.0], [1.0, 2.0], [0.3, 0.7], 100, 5);
        let b = sample_mixture([0.0, 10.0], [1.0, 2.0], [0.3, 0.7], 100, 5);
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fit_invariants_hold_on_arbitrary_data(
            samples in proptest::collection::vec(-50.0f64..50.0, 2..200),
        ) {
            let fit = fit_gmm2(&samples).unwrap();
            if fit.degenerate {
                prop_assert!(clean_flags(&samples, &fit).iter().all(|&c| c));
                return Ok(());
            }
            prop_assert!(fit.means[0] <= fit.means[1]);
            prop_assert!(fit.stds.iter().all(|&s| s > 0.0));
            prop_assert!((fit.weights[0] + fit.weights[1] - 1.0).abs() < 1e-9);
            prop_assert!(fit.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            for w in fit.ll_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - ll_slack(w[0]));
            }
            prop_assert_eq!(clean_flags(&samples, &fit).len(), samples.len());
        }
    }
}
