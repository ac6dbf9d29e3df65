//! Robust learning on long-tailed, label-noisy embedding datasets.
//!
//! The pipeline: simulate an imbalanced dataset with label noise
//! ([`datasim`]), train a linear-softmax classifier ([`model`],
//! [`trainer`]), separate clean from mislabeled examples by fitting a
//! two-component Gaussian mixture to each class's distances from its
//! prototype direction ([`prototypes`], [`gmm`], [`detect`]), replace
//! suspect labels with soft targets blended from two classifiers' guesses
//! ([`pseudolabel`]), and score everything ([`eval`]). [`io`] pins the
//! on-disk formats the CLI exchanges.
//!
//! Everything is sequential and deterministic: a fixed seed reproduces a
//! run bit for bit.

pub mod dataset;
pub mod datasim;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod io;
pub mod model;
pub mod prototypes;
pub mod pseudolabel;
pub mod trainer;

pub use dataset::{LabeledDataset, SplitTag};
pub use datasim::{
    build_transition_matrix, inject_noise, long_tailed_counts, noisy_blobs, synth_blobs,
    ClassProfile, SynthConfig, SynthOutput, TransitionMatrix,
};
pub use detect::{detect, detect_from, ClassDetection, DetectionResult, MIN_CLASS_FIT};
pub use error::{Result, RoltError};
pub use eval::{
    balanced_accuracy, confusion_matrix, detection_scores, shot_split, small_loss_baseline,
    BalancedAccuracy, DetectionScore, LossFitMode, ShotSplit,
};
pub use gmm::{clean_flags, fit_gmm2, GmmFit};
pub use model::{
    argmax_rows, loss_gradient, one_hot, sgd_step, softmax_rows, GradientEstimate, LinearModel,
};
pub use prototypes::{compute_prototypes, ncm_logits, own_class_distances, Prototypes};
pub use pseudolabel::{
    relabel_noisy, soft_label, update_momentum, GuessPriors, GuessSet, MomentumLogits,
    RelabelOutcome, SoftLabel,
};
pub use trainer::{train, warmup, EpochRecord, Stage, TrainConfig, TrainOutput, Trainer};
