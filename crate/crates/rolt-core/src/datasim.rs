//! Synthetic dataset simulation: long-tailed class priors via exponential
//! decay, label corruption through a class-prior-weighted transition matrix,
//! and Gaussian blob embeddings.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitTag};
use crate::error::{Result, RoltError};

/// Shape of a long-tailed class prior: `K` classes, the largest holding
/// `base_count` examples, head/tail ratio `imbalance_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_count: usize,
    pub base_count: usize,
    pub imbalance_ratio: f64,
}

impl ClassProfile {
    pub fn new(class_count: usize, base_count: usize, imbalance_ratio: f64) -> Self {
        Self {
            class_count,
            base_count,
            imbalance_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(RoltError::InvalidProfile(format!(
                "need at least 2 classes, got {}",
                self.class_count
            )));
        }
        if self.base_count < self.class_count {
            return Err(RoltError::InvalidProfile(format!(
                "base_count {} smaller than class count {}",
                self.base_count, self.class_count
            )));
        }
        if !self.imbalance_ratio.is_finite() || self.imbalance_ratio < 1.0 {
            return Err(RoltError::InvalidProfile(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        Ok(())
    }
}

/// Row-stochastic label-flip matrix: `entries[(i, j)]` is the probability
/// that a ground-truth label `i` is observed as `j`.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub entries: Array2<f64>,
    pub noise_level: f64,
}

impl TransitionMatrix {
    pub fn class_count(&self) -> usize {
        self.entries.nrows()
    }

    /// Check row-stochasticity and the fixed diagonal.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.entries.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(RoltError::DegenerateTransition(format!(
                    "row {i} sums to {sum}"
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(RoltError::DegenerateTransition(format!(
                    "row {i} has a negative entry"
                )));
            }
            if self.entries[(i, i)] != 1.0 - self.noise_level {
                return Err(RoltError::DegenerateTransition(format!(
                    "diagonal {i} is not 1 - noise_level"
                )));
            }
        }
        Ok(())
    }
}

/// Per-class example counts decaying exponentially from `base_count` down
/// to `base_count / rho`: `N_k = round(base * rho^(-k / (K - 1)))` for
/// zero-based `k`, floored at 1 so no class is ever empty.
pub fn long_tailed_counts(profile: &ClassProfile) -> Result<Vec<usize>> {
    profile.validate()?;
    let k = profile.class_count;
    let span = (k - 1) as f64;
    let mut counts = Vec::with_capacity(k);
    for idx in 0..k {
        let decay = profile.imbalance_ratio.powf(-(idx as f64) / span);
        let rounded = (profile.base_count as f64 * decay).round();
        counts.push((rounded as usize).max(1));
    }
    Ok(counts)
}

/// Transition matrix with diagonal `1 - gamma` and off-diagonal mass
/// proportional to class frequency: `T[i][j] = gamma * N_j / (N - N_i)`.
pub fn build_transition_matrix(counts: &[usize], gamma: f64) -> Result<TransitionMatrix> {
    if counts.len() < 2 {
        return Err(RoltError::DegenerateTransition(
            "at least two classes required (off-diagonal denominator is N - N_i)".into(),
        ));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(RoltError::DegenerateTransition(
            "all class counts must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RoltError::DegenerateTransition(format!(
            "noise level must lie in [0, 1], got {gamma}"
        )));
    }
    let k = counts.len();
    let total: usize = counts.iter().sum();
    let mut entries = Array2::zeros((k, k));
    for i in 0..k {
        let denom = (total - counts[i]) as f64;
        for j in 0..k {
            entries[(i, j)] = if i == j {
                1.0 - gamma
            } else {
                gamma * counts[j] as f64 / denom
            };
        }
    }
    Ok(TransitionMatrix {
        entries,
        noise_level: gamma,
    })
}

/// Resample each example's label from the transition-matrix row of its
/// ground-truth class. Ground truth is preserved; the result is
/// deterministic for a given seed.
pub fn inject_noise(
    dataset: &LabeledDataset,
    matrix: &TransitionMatrix,
    seed: u64,
) -> Result<LabeledDataset> {
    let truth = dataset.true_labels.as_ref().ok_or_else(|| {
        RoltError::MissingGroundTruth("noise injection needs true labels".into())
    })?;
    if matrix.class_count() != dataset.class_count {
        return Err(RoltError::DimensionMismatch(format!(
            "transition matrix is {}x{} but dataset has {} classes",
            matrix.class_count(),
            matrix.class_count(),
            dataset.class_count
        )));
    }
    let samplers = matrix
        .entries
        .rows()
        .into_iter()
        .map(|row| WeightedIndex::new(row.iter().copied()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| RoltError::DegenerateTransition(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<usize> = truth.iter().map(|&y| samplers[y].sample(&mut rng)).collect();
    LabeledDataset::new(
        dataset.embeddings.clone(),
        noisy,
        Some(truth.clone()),
        dataset.class_count,
        dataset.split_tag,
    )
}

/// Configuration for the Gaussian blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub profile: ClassProfile,
    pub dim: usize,
    pub separation: f64,
    pub test_per_class: usize,
    pub seed: u64,
}

/// Output of [`synth_blobs`]: a long-tailed train split, a class-balanced
/// test split, and the generating centers (for diagnostics and oracles).
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub centers: Array2<f64>,
}

/// Draw `k` uniformly random unit vectors (normalized standard Gaussians).
pub fn sample_unit_centers(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut centers = Array2::zeros((k, dim));
    for mut row in centers.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = normal.sample(rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    centers
}

/// Isotropic Gaussian samples around fixed class centers; class `k`
/// contributes `counts[k]` rows, labeled with the generating class.
pub fn blobs_from_centers(
    centers: &Array2<f64>,
    counts: &[usize],
    noise_std: f64,
    split_tag: SplitTag,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    if centers.nrows() != counts.len() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} centers vs {} class counts",
            centers.nrows(),
            counts.len()
        )));
    }
    let dim = centers.ncols();
    let total: usize = counts.iter().sum();
    let normal = Normal::new(0.0, noise_std).map_err(|e| {
        RoltError::InvalidProfile(format!("bad noise std {noise_std}: {e}"))
    })?;
    let mut embeddings = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for d in 0..dim {
                embeddings[(row, d)] = centers[(class, d)] + normal.sample(rng);
            }
            labels.push(class);
            row += 1;
        }
    }
    LabeledDataset::new(
        embeddings,
        labels.clone(),
        Some(labels),
        counts.len(),
        split_tag,
    )
}

/// Generate a train/test blob pair: random unit centers scaled by
/// `separation`, unit-variance isotropic noise, long-tailed train counts,
/// and a balanced test split.
pub fn synth_blobs(config: &SynthConfig) -> Result<SynthOutput> {
    if config.dim < 2 {
        return Err(RoltError::InvalidProfile(format!(
            "embedding dim must be >= 2, got {}",
            config.dim
        )));
    }
    if !(config.separation > 0.0) {
        return Err(RoltError::InvalidProfile(format!(
            "separation must be positive, got {}",
            config.separation
        )));
    }
    if config.test_per_class == 0 {
        return Err(RoltError::InvalidProfile(
            "test_per_class must be >= 1".into(),
        ));
    }
    let counts = long_tailed_counts(&config.profile)?;
    let k = config.profile.class_count;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centers = sample_unit_centers(k, config.dim, &mut rng);
    centers.mapv_inplace(|v| v * config.separation);
    let train = blobs_from_centers(&centers, &counts, 1.0, SplitTag::Train, &mut rng)?;
    let test = blobs_from_centers(
        &centers,
        &vec![config.test_per_class; k],
        1.0,
        SplitTag::Test,
        &mut rng,
    )?;
    Ok(SynthOutput {
        train,
        test,
        centers,
    })
}

/// [`synth_blobs`] followed by frequency-proportional label noise on the
/// train split: the transition matrix is built from the ground-truth class
/// counts and sampled with a seed derived from the generator's. The test
/// split stays clean.
pub fn noisy_blobs(config: &SynthConfig, gamma: f64) -> Result<SynthOutput> {
    let mut out = synth_blobs(config)?;
    let counts = out.train.class_counts();
    let matrix = build_transition_matrix(&counts, gamma)?;
    out.train = inject_noise(&out.train, &matrix, config.seed.wrapping_add(1))?;
    Ok(out)
}

/// Nearest-center assignment against known generator centers. Test oracle
/// for separability claims; not part of the learning pipeline.
pub fn nearest_center_labels(centers: &Array2<f64>, embeddings: &Array2<f64>) -> Vec<usize> {
    embeddings
        .rows()
        .into_iter()
        .map(|x| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (k, c) in centers.rows().into_iter().enumerate() {
                let d: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_dist {
                    best_dist = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}
