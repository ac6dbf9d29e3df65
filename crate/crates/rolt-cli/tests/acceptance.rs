//! Release gate: ten numbered checks covering exactness properties,
//! benchmark-scale behavioral orderings, and end-to-end determinism.
//! Every check prints one `[criterion N] PASS/FAIL` line with its measured
//! numbers before asserting, so a red run still reports the full picture.
//!
//! The benchmark throughout is the standard one: 10 classes, dimension 32,
//! base count 1000, centers at radius 6, unit noise, balanced 200/class
//! test split, seeds {0, 1, 2}.

use std::process::Command;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rolt_core::datasim::{build_transition_matrix, noisy_blobs, ClassProfile, SynthConfig};
use rolt_core::detect::detect;
use rolt_core::eval::{
    detection_scores, detection_scores_for_classes, recall_std, shot_split, split_recalls,
    small_loss_baseline, LossFitMode, DEFAULT_FEW_UNDER, DEFAULT_MANY_OVER,
};
use rolt_core::gmm::{fit_gmm2, sample_mixture};
use rolt_core::model::{loss_gradient, one_hot, softmax_cross_entropy, LinearModel};
use rolt_core::pseudolabel::{soft_label, GuessPriors, GuessSet};
use rolt_core::trainer::{train, warmup, TrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

fn bench(rho: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        profile: ClassProfile::new(10, 1000, rho),
        dim: 32,
        separation: 6.0,
        test_per_class: 200,
        seed,
    }
}

fn verdict(n: usize, pass: bool, detail: &str) -> bool {
    println!(
        "[criterion {n:02}] {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn erm_config(total_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        warmup_epochs: total_epochs,
        robust_epochs: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn rolt_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

fn final_test_acc(run: &rolt_core::trainer::TrainOutput) -> f64 {
    run.report
        .last()
        .and_then(|r| r.test_acc_erm)
        .expect("benchmark runs evaluate on a test split")
}

#[test]
fn criterion_01_transition_matrix_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_row_sum = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for trial in 0..1000 {
        let k = rng.random_range(2..=12);
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..=2000)).collect();
        // Hit the endpoints as well as the interior.
        let gamma = match trial % 10 {
            0 => 0.0,
            1 => 0.999,
            _ => rng.random_range(0.0..1.0),
        };
        let t = build_transition_matrix(&counts, gamma).unwrap();
        let total: usize = counts.iter().sum();
        for i in 0..k {
            let row_sum: f64 = t.entries.row(i).sum();
            worst_row_sum = worst_row_sum.max((row_sum - 1.0).abs());
            assert_eq!(t.entries[(i, i)], 1.0 - gamma, "diagonal is exact");
            let denom = (total - counts[i]) as f64;
            for j in 0..k {
                if i == j {
                    continue;
                }
                // Entries equal the defining expression bitwise.
                assert_eq!(t.entries[(i, j)], gamma * counts[j] as f64 / denom);
                // Off-diagonal mass is proportional to class frequency:
                // cross products agree to a few ulps.
                let l = (j + 1) % k;
                if l != i && gamma > 0.0 {
                    let lhs = t.entries[(i, j)] * counts[l] as f64;
                    let rhs = t.entries[(i, l)] * counts[j] as f64;
                    let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
                    worst_ratio = worst_ratio.max(rel);
                    assert!(rel <= 1e-15, "ratio off by {rel} at trial {trial}");
                }
            }
        }
    }
    assert!(
        verdict(
            1,
            worst_row_sum <= 1e-12,
            &format!(
                "1000 random configs: worst |row sum - 1| = {worst_row_sum:.2e}, \
                 diagonals bitwise 1 - gamma, worst frequency-ratio error = {worst_ratio:.2e}"
            ),
        ),
        "row sums drifted past 1e-12"
    );
}

#[test]
fn criterion_02_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (n, d, k) = (16, 7, 5);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let model = LinearModel::init(k, d, 9000 + trial);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let raw = Array2::from_shape_fn((n, k), |_| rng.random_range(-3.0..3.0f64));
        let targets = {
            let mut t = raw.mapv(f64::exp);
            for mut row in t.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            t
        };
        let weights: Option<Vec<f64>> = (trial % 2 == 0)
            .then(|| (0..n).map(|_| rng.random_range(0.1..3.0)).collect());

        let (_, grad) = loss_gradient(&model, &x.view(), &targets, weights.as_deref()).unwrap();
        let loss_at = |m: &LinearModel| loss_gradient(m, &x.view(), &targets, weights.as_deref())
            .unwrap()
            .0;

        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for a in 0..k {
            for b in 0..d {
                let mut plus = model.clone();
                plus.weights[(a, b)] += h;
                let mut minus = model.clone();
                minus.weights[(a, b)] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                diff_sq += (fd - grad.dw[(a, b)]).powi(2);
                norm_sq += grad.dw[(a, b)].powi(2);
            }
            let mut plus = model.clone();
            plus.bias[a] += h;
            let mut minus = model.clone();
            minus.bias[a] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            diff_sq += (fd - grad.db[a]).powi(2);
            norm_sq += grad.db[a].powi(2);
        }
        worst = worst.max((diff_sq / norm_sq).sqrt());
    }
    assert!(
        verdict(
            2,
            worst <= 1e-4,
            &format!("100 trials, central differences (h = {h}): worst relative error {worst:.2e}"),
        ),
        "analytic gradient disagrees with finite differences"
    );
}

#[test]
fn criterion_03_gmm_recovers_separated_mixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_param = 0.0f64;
    let mut monotone = true;
    for trial in 0..50u64 {
        let s1: f64 = rng.random_range(0.3..1.2);
        let s2: f64 = rng.random_range(0.3..1.2);
        let mu1: f64 = rng.random_range(-3.0..3.0);
        let gap = 4.0 * s1.max(s2) * rng.random_range(1.0..1.5);
        let mu2 = mu1 + gap;
        let w1 = rng.random_range(0.25..0.75);
        let data = sample_mixture([mu1, mu2], [s1, s2], [w1, 1.0 - w1], 10_000, 5000 + trial);
        let fit = fit_gmm2(&data).unwrap();

        for (est, truth) in [
            (fit.means[0], mu1),
            (fit.means[1], mu2),
            (fit.stds[0], s1),
            (fit.stds[1], s2),
            (fit.weights[0], w1),
            (fit.weights[1], 1.0 - w1),
        ] {
            worst_param = worst_param.max((est - truth).abs());
        }
        for pair in fit.ll_trace.windows(2) {
            if pair[1] < pair[0] {
                monotone = false;
            }
        }
    }
    assert!(
        verdict(
            3,
            worst_param <= 0.05 && monotone,
            &format!(
                "50 mixtures, 10^4 samples each: worst |estimate - truth| = {worst_param:.4}, \
                 log-likelihood non-decreasing at every iteration: {monotone}"
            ),
        ),
        "EM failed to recover a separated mixture"
    );
}

#[test]
fn criterion_04_soft_labels_stay_on_the_simplex() {
    let priors = GuessPriors::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_sum = 0.0f64;
    for trial in 0..100_000usize {
        let k = rng.random_range(2..=10);
        let (erm, ncm, original) = match trial % 3 {
            // Full coincidence and all-distinct patterns, then random.
            0 => {
                let g = rng.random_range(0..k);
                (g, g, g)
            }
            1 if k >= 3 => (0, 1, 2),
            _ => (
                rng.random_range(0..k),
                rng.random_range(0..k),
                rng.random_range(0..k),
            ),
        };
        let label = soft_label(&GuessSet { erm, ncm, original }, &priors, k).unwrap();
        assert!(label.probs.iter().all(|&p| p >= 0.0), "negative mass");
        worst_sum = worst_sum.max((label.probs.iter().sum::<f64>() - 1.0).abs());
    }
    assert!(worst_sum <= 1e-9, "sum drifted by {worst_sum}");

    let example = soft_label(&GuessSet { erm: 1, ncm: 1, original: 2 }, &priors, 5).unwrap();
    let expected = [1.0 / 15.0, 0.6, 0.2, 1.0 / 15.0, 1.0 / 15.0];
    let worked = example
        .probs
        .iter()
        .zip(expected)
        .all(|(p, e)| (p - e).abs() <= 1e-4);
    assert!(
        verdict(
            4,
            worked,
            &format!(
                "10^5 patterns on the simplex (worst sum error {worst_sum:.1e}); \
                 coinciding-guess example gives {:?}",
                example.probs
            ),
        ),
        "worked example mismatch: {:?}",
        example.probs
    );
}

#[test]
fn criterion_05_clean_data_non_regression() {
    let mut detail = String::new();
    let mut pass = true;
    for rho in [10.0, 100.0] {
        for seed in SEEDS {
            let data = noisy_blobs(&bench(rho, seed), 0.0).unwrap();
            let erm = train(&data.train, Some(&data.test), &erm_config(50, seed)).unwrap();
            let rolt = train(&data.train, Some(&data.test), &rolt_config(seed)).unwrap();
            let (e, r) = (final_test_acc(&erm), final_test_acc(&rolt));
            if (e - r).abs() > 0.02 {
                pass = false;
            }
            detail.push_str(&format!(
                "rho={rho} seed={seed}: erm {e:.4} rolt {r:.4}; "
            ));
        }
    }
    assert!(
        verdict(5, pass, &format!("gamma=0: {}", detail.trim_end_matches("; "))),
        "robust training regressed on clean data"
    );
}

#[test]
fn criterion_06_noise_robustness_ordering() {
    let mut detail = String::new();
    let mut failures = Vec::new();
    for rho in [10.0, 100.0] {
        for gamma in [0.2, 0.5] {
            let mut erm_sum = 0.0;
            let mut rolt_sum = 0.0;
            for seed in SEEDS {
                let data = noisy_blobs(&bench(rho, seed), gamma).unwrap();
                erm_sum +=
                    final_test_acc(&train(&data.train, Some(&data.test), &erm_config(50, seed)).unwrap());
                rolt_sum +=
                    final_test_acc(&train(&data.train, Some(&data.test), &rolt_config(seed)).unwrap());
            }
            let erm = erm_sum / SEEDS.len() as f64;
            let rolt = rolt_sum / SEEDS.len() as f64;
            let margin = if gamma == 0.5 { 0.05 } else { 0.0 };
            detail.push_str(&format!(
                "rho={rho}/gamma={gamma}: erm {erm:.4} rolt {rolt:.4} (gap {:+.4}); ",
                rolt - erm
            ));
            if rolt < erm + margin {
                failures.push(format!(
                    "rho={rho}/gamma={gamma}: rolt {rolt:.4} < erm {erm:.4} + {margin}"
                ));
            }
        }
    }
    assert!(
        verdict(6, failures.is_empty(), detail.trim_end_matches("; ")),
        "ordering violated: {failures:?}"
    );
}

#[test]
fn criterion_07_detection_quality() {
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut proto_few_sum = 0.0;
    let mut loss_few_sum = 0.0;
    for seed in SEEDS {
        let data = noisy_blobs(&bench(100.0, seed), 0.3).unwrap();
        let train_ds = &data.train;
        let shots = shot_split(&train_ds.class_counts(), DEFAULT_MANY_OVER, DEFAULT_FEW_UNDER)
            .unwrap();

        let detection = detect(train_ds, 1).unwrap();
        let score = detection_scores(&detection.clean_mask, train_ds).unwrap();
        precision_sum += score.precision;
        recall_sum += score.recall;
        proto_few_sum +=
            detection_scores_for_classes(&detection.clean_mask, train_ds, &shots.few)
                .unwrap()
                .recall;

        // Small-loss baseline: losses from a warmed-up model, one global
        // two-component fit, low-loss component believed clean.
        let (model, _) = warmup(train_ds, &erm_config(20, seed)).unwrap();
        let logits = model.logits(&train_ds.embeddings.view()).unwrap();
        let targets = one_hot(&train_ds.noisy_labels, 10).unwrap();
        let losses: Vec<f64> = (0..train_ds.len())
            .map(|i| softmax_cross_entropy(&logits.row(i), &targets.row(i)).unwrap())
            .collect();
        let mask =
            small_loss_baseline(&losses, &train_ds.noisy_labels, 10, LossFitMode::Global).unwrap();
        loss_few_sum += detection_scores_for_classes(&mask, train_ds, &shots.few)
            .unwrap()
            .recall;
    }
    let n = SEEDS.len() as f64;
    let (precision, recall) = (precision_sum / n, recall_sum / n);
    let (proto_few, loss_few) = (proto_few_sum / n, loss_few_sum / n);
    let pass = precision >= 0.85 && recall >= 0.85 && proto_few > loss_few;
    assert!(
        verdict(
            7,
            pass,
            &format!(
                "rho=100 gamma=0.3: precision {precision:.4} (need 0.85), recall {recall:.4} \
                 (need 0.85), tail clean-recall {proto_few:.4} vs small-loss {loss_few:.4}"
            ),
        ),
        "detection quality below threshold"
    );
}

#[test]
fn criterion_08_ncm_balance() {
    let mut erm_std_sum = 0.0;
    let mut ncm_std_sum = 0.0;
    for seed in SEEDS {
        let data = noisy_blobs(&bench(100.0, seed), 0.3).unwrap();
        let run = train(&data.train, Some(&data.test), &erm_config(50, seed)).unwrap();
        let last = run.report.last().unwrap();
        erm_std_sum += recall_std(&last.erm_recalls);
        ncm_std_sum += recall_std(&last.ncm_recalls);
    }
    let n = SEEDS.len() as f64;
    let (erm_std, ncm_std) = (erm_std_sum / n, ncm_std_sum / n);
    assert!(
        verdict(
            8,
            ncm_std < erm_std,
            &format!(
                "rho=100 gamma=0.3, linear training: per-class recall std ncm {ncm_std:.4} \
                 vs erm head {erm_std:.4}"
            ),
        ),
        "NCM predictions were not more balanced"
    );
}

#[test]
fn criterion_09_drw_tail_benefit() {
    let mut plain_sum = 0.0;
    let mut drw_sum = 0.0;
    for seed in SEEDS {
        let data = noisy_blobs(&bench(100.0, seed), 0.5).unwrap();
        let shots = shot_split(
            &data.train.class_counts(),
            DEFAULT_MANY_OVER,
            DEFAULT_FEW_UNDER,
        )
        .unwrap();
        let few_recall = |config: &TrainConfig| {
            let run = train(&data.train, Some(&data.test), config).unwrap();
            split_recalls(&run.report.last().unwrap().erm_recalls, &shots).few
        };
        plain_sum += few_recall(&rolt_config(seed));
        drw_sum += few_recall(&TrainConfig {
            drw_enabled: true,
            ..rolt_config(seed)
        });
    }
    let n = SEEDS.len() as f64;
    let (plain, drw) = (plain_sum / n, drw_sum / n);
    assert!(
        verdict(
            9,
            drw >= plain,
            &format!("rho=100 gamma=0.5 few-split recall: with reweighting {drw:.4} vs without {plain:.4}"),
        ),
        "deferred reweighting hurt the tail"
    );
}

#[test]
fn criterion_10_bitwise_deterministic_reports() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_rolt");
    let data = dir.path().join("data");
    let status = Command::new(exe)
        .args(["simulate", "--rho", "100", "--gamma", "0.3", "--seed", "0", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success(), "simulate failed");

    let mut reports = Vec::new();
    for name in ["run_a", "run_b"] {
        let out = dir.path().join(name);
        let status = Command::new(exe)
            .arg("train")
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "train failed");
        reports.push(std::fs::read(out.join("report.csv")).unwrap());
    }
    assert!(
        verdict(
            10,
            reports[0] == reports[1],
            &format!(
                "two identical `rolt train` invocations: report.csv byte-identical \
                 ({} bytes)",
                reports[0].len()
            ),
        ),
        "reports differ between identical runs"
    );
}
