//! Training orchestration: a warm-up stage of plain cross-entropy SGD on
//! the observed labels, then robust epochs that re-detect label noise,
//! refresh the momentum logit stores, rebuild soft targets, and take one
//! SGD pass over the combined clean + relabeled set — optionally with
//! deferred class reweighting late in training.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::detect::{detect, DetectionResult};
use crate::error::{Result, RoltError};
use crate::eval::{balanced_accuracy, detection_scores};
use crate::model::{
    argmax_rows, log_softmax, loss_gradient, one_hot, sgd_step, LinearModel,
};
use crate::prototypes::{compute_prototypes, ncm_logits, Prototypes};
use crate::pseudolabel::{
    relabel_noisy, update_momentum, GuessPriors, MomentumLogits, RelabelOutcome,
};

/// All knobs for one training run. Deserialization rejects unknown keys;
/// omitted keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub robust_epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; the effective rate is `lr` times the
    /// multiplier of the last `schedule` entry at or before the epoch.
    pub lr: f64,
    /// Piecewise-constant `(epoch, multiplier)` breakpoints. `None` means
    /// drop to 1% at 80% of the epoch budget and to 0.01% at 90%.
    pub schedule: Option<Vec<(usize, f64)>>,
    pub weight_decay: f64,
    /// EMA coefficient for the momentum logit stores.
    pub alpha: f64,
    pub priors: GuessPriors,
    pub drw_enabled: bool,
    /// Fraction of the epoch budget after which class reweighting kicks in.
    pub drw_start_fraction: f64,
    /// Effective-number decay for the class weights.
    pub drw_beta: f64,
    /// Prototype refinement rounds inside each detection pass.
    pub refinement_rounds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            robust_epochs: 30,
            batch_size: 128,
            lr: 0.1,
            schedule: None,
            weight_decay: 2e-4,
            alpha: 0.9,
            priors: GuessPriors::default(),
            drw_enabled: false,
            drw_start_fraction: 0.8,
            drw_beta: 0.9999,
            refinement_rounds: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.robust_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RoltError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(RoltError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(RoltError::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(RoltError::InvalidConfig(format!(
                "alpha must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.drw_start_fraction > 0.0 && self.drw_start_fraction <= 1.0) {
            return Err(RoltError::InvalidConfig(format!(
                "drw_start_fraction must lie in (0, 1], got {}",
                self.drw_start_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.drw_beta) {
            return Err(RoltError::InvalidConfig(format!(
                "drw_beta must lie in [0, 1), got {}",
                self.drw_beta
            )));
        }
        self.priors.validate()?;
        if let Some(schedule) = &self.schedule {
            let mut last: Option<usize> = None;
            for &(epoch, mult) in schedule {
                if !(mult.is_finite() && mult > 0.0) {
                    return Err(RoltError::InvalidConfig(format!(
                        "schedule multiplier must be positive, got {mult}"
                    )));
                }
                if last.is_some_and(|prev| epoch <= prev) {
                    return Err(RoltError::InvalidConfig(
                        "schedule epochs must be strictly increasing".into(),
                    ));
                }
                last = Some(epoch);
            }
        }
        Ok(())
    }

    /// The schedule actually in force (user-provided or default).
    pub fn resolved_schedule(&self) -> Vec<(usize, f64)> {
        if let Some(schedule) = &self.schedule {
            return schedule.clone();
        }
        let total = self.total_epochs();
        let first = (0.8 * total as f64).floor() as usize;
        let second = (0.9 * total as f64).floor() as usize;
        if first == second {
            vec![(second, 1e-4)]
        } else {
            vec![(first, 1e-2), (second, 1e-4)]
        }
    }

    /// Effective learning rate at a (global) epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut mult = 1.0;
        for &(start, m) in &self.resolved_schedule() {
            if epoch >= start {
                mult = m;
            }
        }
        self.lr * mult
    }

    /// First epoch with class reweighting active.
    pub fn drw_start_epoch(&self) -> usize {
        (self.drw_start_fraction * self.total_epochs() as f64).floor() as usize
    }

    pub fn drw_active(&self, epoch: usize) -> bool {
        self.drw_enabled && epoch >= self.drw_start_epoch()
    }
}

/// Per-class weights from effective numbers: `E = (1 - beta^n)/(1 - beta)`,
/// `w ∝ 1/E`, normalized to mean 1 across classes. Counts are the observed
/// (noisy) class sizes; empty classes are treated as size 1.
pub fn drw_class_weights(counts: &[usize], beta: f64) -> Vec<f64> {
    let inverse_effective: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let n = c.max(1) as f64;
            if beta <= 0.0 {
                1.0
            } else {
                (1.0 - beta) / (1.0 - beta.powf(n))
            }
        })
        .collect();
    let mean = inverse_effective.iter().sum::<f64>() / inverse_effective.len().max(1) as f64;
    inverse_effective.iter().map(|w| w / mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Robust,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Warmup => write!(f, "warmup"),
            Stage::Robust => write!(f, "robust"),
        }
    }
}

/// One epoch's worth of report columns. Loss fields are recomputed over
/// the full training set from the epoch's own targets at the end-of-epoch
/// parameters; `loss` is the combined mean over clean and noisy examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
    pub loss_clean: f64,
    pub loss_noisy: f64,
    pub clean_count: usize,
    pub noisy_count: usize,
    pub drw_active: bool,
    pub train_acc: f64,
    pub detect_precision: Option<f64>,
    pub detect_recall: Option<f64>,
    pub test_acc_erm: Option<f64>,
    pub test_acc_ncm: Option<f64>,
    pub erm_recalls: Vec<f64>,
    pub ncm_recalls: Vec<f64>,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LinearModel,
    /// Snapshot at the epoch with the best ERM balanced test accuracy
    /// (equal to `model` when no test set was supplied).
    pub best_model: LinearModel,
    pub best_epoch: Option<usize>,
    pub prototypes: Prototypes,
    pub report: Vec<EpochRecord>,
    pub final_detection: Option<DetectionResult>,
    pub final_relabel: Option<RelabelOutcome>,
    pub config: TrainConfig,
}

impl TrainOutput {
    pub fn last_record(&self) -> Option<&EpochRecord> {
        self.report.last()
    }
}

/// Stepwise training state; [`Trainer::step`] advances one epoch.
pub struct Trainer<'a> {
    train: &'a LabeledDataset,
    test: Option<&'a LabeledDataset>,
    config: TrainConfig,
    pub model: LinearModel,
    pub erm_store: MomentumLogits,
    pub ncm_store: MomentumLogits,
    epoch: usize,
    shuffle_rng: ChaCha8Rng,
    one_hot_noisy: Array2<f64>,
    drw_weights: Vec<f64>,
    /// Prototypes from all observed labels; NCM evaluation during warm-up.
    warmup_prototypes: Prototypes,
    records: Vec<EpochRecord>,
    best: Option<(usize, f64, LinearModel)>,
    pub last_detection: Option<DetectionResult>,
    pub last_relabel: Option<RelabelOutcome>,
    /// Targets used for the most recent epoch's gradients.
    pub last_targets: Option<Array2<f64>>,
    last_prototypes: Prototypes,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a LabeledDataset,
        test: Option<&'a LabeledDataset>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(RoltError::InvalidDataset(
                "cannot train on an empty dataset".into(),
            ));
        }
        if let Some(t) = test {
            if t.dim() != train.dim() || t.class_count != train.class_count {
                return Err(RoltError::DimensionMismatch(format!(
                    "test set is {} classes x dim {}, train is {} x {}",
                    t.class_count,
                    t.dim(),
                    train.class_count,
                    train.dim()
                )));
            }
        }
        let k = train.class_count;
        let n = train.len();
        let model = LinearModel::init(k, train.dim(), config.seed);
        // Separate stream for shuffles so batch order never aliases the
        // weight-init draws.
        let shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let one_hot_noisy = one_hot(&train.noisy_labels, k)?;
        let drw_weights = drw_class_weights(&train.class_counts(), config.drw_beta);
        let warmup_prototypes =
            compute_prototypes(&train.embeddings.view(), &train.noisy_labels, k, None)?;
        Ok(Self {
            train,
            test,
            model,
            erm_store: MomentumLogits::new(n, k, config.alpha)?,
            ncm_store: MomentumLogits::new(n, k, config.alpha)?,
            epoch: 0,
            shuffle_rng,
            one_hot_noisy,
            drw_weights,
            last_prototypes: warmup_prototypes.clone(),
            warmup_prototypes,
            records: Vec::with_capacity(config.total_epochs()),
            best: None,
            last_detection: None,
            last_relabel: None,
            last_targets: None,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    /// Run the next epoch (warm-up or robust by position) and return its
    /// report record.
    pub fn step(&mut self) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(RoltError::InvalidConfig(
                "all configured epochs have already run".into(),
            ));
        }
        let record = if self.epoch < self.config.warmup_epochs {
            self.warmup_epoch()?
        } else {
            self.robust_epoch()?
        };
        self.records.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    fn warmup_epoch(&mut self) -> Result<EpochRecord> {
        let targets = self.one_hot_noisy.clone();
        let weights = self.epoch_weights(&targets);
        self.sgd_pass(&targets, weights.as_deref())?;
        // The final warm-up epoch seeds the ERM momentum store from its
        // closing logits (first update copies them verbatim).
        if self.epoch + 1 == self.config.warmup_epochs {
            let z = self.model.logits(&self.train.embeddings.view())?;
            self.erm_store = update_momentum(&self.erm_store, &z)?;
        }
        let mask = vec![true; self.train.len()];
        self.last_targets = Some(targets);
        self.finish_epoch(Stage::Warmup, &mask, None)
    }

    fn robust_epoch(&mut self) -> Result<EpochRecord> {
        // Pinned order: prototypes + detection, then momentum stores from
        // the pre-update model, then targets, then the SGD pass.
        let detection = detect(self.train, self.config.refinement_rounds)?;
        let erm_z = self.model.logits(&self.train.embeddings.view())?;
        self.erm_store = update_momentum(&self.erm_store, &erm_z)?;
        let ncm_z = ncm_logits(&self.train.embeddings.view(), &detection.prototypes)?;
        self.ncm_store = update_momentum(&self.ncm_store, &ncm_z)?;
        let relabel = relabel_noisy(
            &detection.clean_mask,
            &self.erm_store,
            &self.ncm_store,
            &self.config.priors,
            &self.train.noisy_labels,
            self.train.class_count,
        )?;
        let weights = self.epoch_weights(&relabel.targets);
        self.sgd_pass(&relabel.targets, weights.as_deref())?;
        let detect_scores = if self.train.true_labels.is_some() {
            let score = detection_scores(&detection.clean_mask, self.train)?;
            Some((score.precision, score.recall))
        } else {
            None
        };
        let mask = detection.clean_mask.clone();
        self.last_prototypes = detection.prototypes.clone();
        self.last_targets = Some(relabel.targets.clone());
        self.last_detection = Some(detection);
        self.last_relabel = Some(relabel);
        self.finish_epoch(Stage::Robust, &mask, detect_scores)
    }

    /// Per-example weights when deferred reweighting is active: the
    /// target-weighted mean of the class weights (reduces to `w_y` for
    /// one-hot targets).
    fn epoch_weights(&self, targets: &Array2<f64>) -> Option<Vec<f64>> {
        if !self.config.drw_active(self.epoch) {
            return None;
        }
        let w = Array1::from_vec(self.drw_weights.clone());
        Some(targets.rows().into_iter().map(|t| t.dot(&w)).collect())
    }

    fn sgd_pass(&mut self, targets: &Array2<f64>, weights: Option<&[f64]>) -> Result<()> {
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        for batch in order.chunks(self.config.batch_size) {
            let x = self.train.embeddings.select(Axis(0), batch);
            let t = targets.select(Axis(0), batch);
            let w: Option<Vec<f64>> = weights.map(|w| batch.iter().map(|&i| w[i]).collect());
            let (_, grad) = loss_gradient(&self.model, &x.view(), &t, w.as_deref())?;
            self.model = sgd_step(&self.model, &grad, lr, self.config.weight_decay);
        }
        Ok(())
    }

    fn finish_epoch(
        &mut self,
        stage: Stage,
        clean_mask: &[bool],
        detect_scores: Option<(f64, f64)>,
    ) -> Result<EpochRecord> {
        let targets = self
            .last_targets
            .as_ref()
            .expect("targets are stored before finish_epoch");
        let logits = self.model.logits(&self.train.embeddings.view())?;
        let (loss, loss_clean, loss_noisy) = split_losses(&logits, targets, clean_mask);
        let train_preds = argmax_rows(&logits);
        let train_acc = train_preds
            .iter()
            .zip(&self.train.noisy_labels)
            .filter(|&(p, y)| p == y)
            .count() as f64
            / self.train.len() as f64;
        let (detect_precision, detect_recall) = match detect_scores {
            Some((p, r)) => (Some(p), Some(r)),
            None => (None, None),
        };
        let prototypes = match stage {
            Stage::Warmup => &self.warmup_prototypes,
            Stage::Robust => &self.last_prototypes,
        };
        let mut test_acc_erm = None;
        let mut test_acc_ncm = None;
        let mut erm_recalls = Vec::new();
        let mut ncm_recalls = Vec::new();
        if let Some(test) = self.test {
            let truth = test.true_labels.as_ref().unwrap_or(&test.noisy_labels);
            let erm_preds = self.model.predict(&test.embeddings.view())?;
            let erm = balanced_accuracy(&erm_preds, truth, test.class_count)?;
            let ncm_preds = argmax_rows(&ncm_logits(&test.embeddings.view(), prototypes)?);
            let ncm = balanced_accuracy(&ncm_preds, truth, test.class_count)?;
            test_acc_erm = Some(erm.balanced);
            test_acc_ncm = Some(ncm.balanced);
            erm_recalls = erm.per_class_recall;
            ncm_recalls = ncm.per_class_recall;
            let is_better = self
                .best
                .as_ref()
                .map_or(true, |(_, best_acc, _)| erm.balanced > *best_acc);
            if is_better {
                self.best = Some((self.epoch, erm.balanced, self.model.clone()));
            }
        }
        let clean_count = clean_mask.iter().filter(|&&c| c).count();
        Ok(EpochRecord {
            epoch: self.epoch,
            stage,
            lr: self.config.lr_at(self.epoch),
            loss,
            loss_clean,
            loss_noisy,
            clean_count,
            noisy_count: self.train.len() - clean_count,
            drw_active: self.config.drw_active(self.epoch),
            train_acc,
            detect_precision,
            detect_recall,
            test_acc_erm,
            test_acc_ncm,
            erm_recalls,
            ncm_recalls,
        })
    }

    /// Consume the trainer after all epochs and package the outputs.
    pub fn finish(mut self) -> Result<TrainOutput> {
        while !self.is_finished() {
            self.step()?;
        }
        let (best_epoch, best_model) = match self.best {
            Some((epoch, _, model)) => (Some(epoch), model),
            None => (None, self.model.clone()),
        };
        Ok(TrainOutput {
            model: self.model,
            best_model,
            best_epoch,
            prototypes: self.last_prototypes,
            report: self.records,
            final_detection: self.last_detection,
            final_relabel: self.last_relabel,
            config: self.config,
        })
    }
}

/// Combined and per-subset mean cross-entropies of `targets` at the given
/// logits: `loss` averages over everything, the other two over each side
/// of the clean mask (0 when a side is empty).
pub fn split_losses(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
    clean_mask: &[bool],
) -> (f64, f64, f64) {
    let ls = log_softmax(logits);
    let mut clean_sum = 0.0;
    let mut noisy_sum = 0.0;
    let mut clean_n = 0usize;
    for (i, mask) in clean_mask.iter().enumerate() {
        let ce = -targets.row(i).dot(&ls.row(i));
        if *mask {
            clean_sum += ce;
            clean_n += 1;
        } else {
            noisy_sum += ce;
        }
    }
    let n = clean_mask.len();
    let noisy_n = n - clean_n;
    let loss = (clean_sum + noisy_sum) / n.max(1) as f64;
    let loss_clean = if clean_n > 0 { clean_sum / clean_n as f64 } else { 0.0 };
    let loss_noisy = if noisy_n > 0 { noisy_sum / noisy_n as f64 } else { 0.0 };
    (loss, loss_clean, loss_noisy)
}

/// Warm-up stage alone: plain cross-entropy SGD on the observed labels,
/// returning the model and the seeded ERM momentum store.
pub fn warmup(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(LinearModel, MomentumLogits)> {
    let mut cfg = config.clone();
    cfg.robust_epochs = 0;
    let mut trainer = Trainer::new(dataset, None, cfg)?;
    while !trainer.is_finished() {
        trainer.step()?;
    }
    Ok((trainer.model, trainer.erm_store))
}

/// Full run: warm-up, then robust epochs, evaluating on `test` (when
/// given) after every epoch.
pub fn train(
    dataset: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    Trainer::new(dataset, test, config.clone())?.finish()
}
