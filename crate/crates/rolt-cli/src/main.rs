//! `rolt`: generate long-tailed noisy-label embedding benchmarks, split
//! them into believed-clean/noisy examples, train linear classifiers with
//! the robust relabeling loop, and aggregate paired-run sweeps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rolt_core::dataset::LabeledDataset;
use rolt_core::datasim::{long_tailed_counts, noisy_blobs, ClassProfile, SynthConfig};
use rolt_core::detect::{detect, DetectionResult};
use rolt_core::eval::{
    balanced_accuracy, detection_scores, detection_scores_for_classes, recall_std, shot_split,
    split_recalls, BalancedAccuracy, DetectionScore, ShotRecalls, ShotSplit, DEFAULT_FEW_UNDER,
    DEFAULT_MANY_OVER,
};
use rolt_core::io;
use rolt_core::model::{argmax_rows, LinearModel};
use rolt_core::prototypes::ncm_logits;
use rolt_core::pseudolabel::{relabel_noisy, update_momentum, MomentumLogits, RelabelOutcome};
use rolt_core::trainer::{train, EpochRecord, TrainConfig, TrainOutput};

#[derive(Parser)]
#[command(
    name = "rolt",
    version,
    about = "Robust long-tailed classification under label noise on fixed embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a long-tailed Gaussian-blob benchmark with injected label noise
    Simulate(SimulateArgs),
    /// Split a dataset into believed-clean and believed-noisy examples
    Detect(DetectArgs),
    /// Train a linear classifier (warm-up, then robust relabeling epochs)
    Train(TrainArgs),
    /// Score a finished run and write metrics.json
    Eval(EvalArgs),
    /// Train every (rho, gamma, seed, method) cell of a grid
    Sweep(SweepArgs),
    /// Aggregate a sweep directory into summary tables
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of classes
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Examples in the largest class
    #[arg(long, default_value_t = 1000)]
    base: usize,
    /// Imbalance ratio: largest class count over smallest
    #[arg(long, default_value_t = 100.0)]
    rho: f64,
    /// Label noise level in [0, 1)
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Embedding dimension
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Distance of each class center from the origin
    #[arg(long, default_value_t = 6.0)]
    sep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Balanced test examples per class
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    /// Output directory; receives train/ and test/ dataset dirs
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Dataset dir, or a simulate output dir (its train/ split is used)
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prototype refinement rounds
    #[arg(long, default_value_t = 1)]
    rounds: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset dir, or a simulate output dir (train/ + test/)
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; receives report.csv, model.json, prototypes.json,
    /// split.csv, labels.csv, run.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `rolt train`
    #[arg(long)]
    run: PathBuf,
    /// Override the dataset location recorded in run.json
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid spec JSON; missing fields fall back to the standard benchmark
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep output directory
    #[arg(long)]
    grid: PathBuf,
    /// Where to write the tables (defaults to the sweep directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => simulate(args),
        Command::Detect(args) => run_detect(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Report(args) => run_report(args),
    }
}

/// Accepts either a dataset directory (meta.json present) or a simulate
/// output directory holding train/ and optionally test/.
fn resolve_data(dir: &Path) -> anyhow::Result<(LabeledDataset, Option<LabeledDataset>)> {
    if dir.join("meta.json").exists() {
        let (ds, _) = io::read_dataset(dir)?;
        return Ok((ds, None));
    }
    let train_dir = dir.join("train");
    if train_dir.join("meta.json").exists() {
        let (train, _) = io::read_dataset(&train_dir)?;
        let test_dir = dir.join("test");
        let test = if test_dir.join("meta.json").exists() {
            Some(io::read_dataset(&test_dir)?.0)
        } else {
            None
        };
        return Ok((train, test));
    }
    bail!(
        "no dataset under {}: expected meta.json or train/meta.json",
        dir.display()
    );
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let profile = ClassProfile::new(args.classes, args.base, args.rho);
    let config = SynthConfig {
        profile,
        dim: args.dim,
        separation: args.sep,
        test_per_class: args.test_per_class,
        seed: args.seed,
    };
    let out = noisy_blobs(&config, args.gamma)?;
    io::write_dataset(&args.out.join("train"), &out.train, Some(args.seed), Some(profile))?;
    io::write_dataset(&args.out.join("test"), &out.test, Some(args.seed), None)?;

    let truth = out.train.true_labels.as_ref().expect("synthetic data carries truth");
    let flipped = out
        .train
        .noisy_labels
        .iter()
        .zip(truth)
        .filter(|(a, b)| a != b)
        .count();
    println!(
        "wrote {} train examples (class counts {:?}, {} mislabeled) and {} test examples to {}",
        out.train.len(),
        out.train.class_counts(),
        flipped,
        out.test.len(),
        args.out.display()
    );
    Ok(())
}

fn run_detect(args: DetectArgs) -> anyhow::Result<()> {
    let (train_ds, _) = resolve_data(&args.data)?;
    let detection = detect(&train_ds, args.rounds)?;
    fs::create_dir_all(&args.out)?;
    io::write_split(&args.out.join("split.csv"), &detection, &train_ds)?;
    io::write_gmm(&args.out.join("gmm.json"), &detection)?;
    io::write_prototypes(
        &args.out.join("prototypes.json"),
        &detection.prototypes,
        &train_ds.class_counts(),
    )?;

    for pc in &detection.per_class {
        let clean = pc.clean.iter().filter(|&&c| c).count();
        let fit = match &pc.fit {
            Some(f) if f.degenerate => "degenerate",
            Some(f) if f.converged => "converged",
            Some(_) => "max-iterations",
            None => "kept whole",
        };
        println!(
            "class {}: {} members, {} clean / {} noisy ({})",
            pc.class + 1,
            pc.indices.len(),
            clean,
            pc.indices.len() - clean,
            fit
        );
    }
    if train_ds.true_labels.is_some() {
        let score = detection_scores(&detection.clean_mask, &train_ds)?;
        println!(
            "vs ground truth: precision {:.4}, recall {:.4} ({} selected)",
            score.precision, score.recall, score.selected
        );
    }
    println!("wrote split.csv, gmm.json, prototypes.json to {}", args.out.display());
    Ok(())
}

/// Detection and targets for runs that never entered the robust stage, so
/// split.csv and labels.csv are always present in a run directory.
fn final_targets(
    ds: &LabeledDataset,
    model: &LinearModel,
    config: &TrainConfig,
) -> anyhow::Result<(DetectionResult, RelabelOutcome)> {
    let detection = detect(ds, config.refinement_rounds)?;
    let k = ds.class_count;
    let erm_store = update_momentum(
        &MomentumLogits::new(ds.len(), k, config.alpha)?,
        &model.logits(&ds.embeddings.view())?,
    )?;
    let ncm_store = update_momentum(
        &MomentumLogits::new(ds.len(), k, config.alpha)?,
        &ncm_logits(&ds.embeddings.view(), &detection.prototypes)?,
    )?;
    let relabel = relabel_noisy(
        &detection.clean_mask,
        &erm_store,
        &ncm_store,
        &config.priors,
        &ds.noisy_labels,
        k,
    )?;
    Ok((detection, relabel))
}

fn write_run_dir(
    dir: &Path,
    run: &TrainOutput,
    train_ds: &LabeledDataset,
    test_ds: Option<&LabeledDataset>,
    data_dir: &Path,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    io::write_report(&dir.join("report.csv"), &run.report, train_ds.class_count)?;
    io::write_model(&dir.join("model.json"), &run.model)?;
    io::write_prototypes(
        &dir.join("prototypes.json"),
        &run.prototypes,
        &train_ds.class_counts(),
    )?;

    let synthesized;
    let (detection, relabel) = match (&run.final_detection, &run.final_relabel) {
        (Some(d), Some(r)) => (d, r),
        _ => {
            synthesized = final_targets(train_ds, &run.model, &run.config)?;
            (&synthesized.0, &synthesized.1)
        }
    };
    io::write_split(&dir.join("split.csv"), detection, train_ds)?;
    io::write_labels(
        &dir.join("labels.csv"),
        relabel,
        &detection.clean_mask,
        &train_ds.noisy_labels,
    )?;

    let manifest = io::RunManifest {
        config: run.config.clone(),
        data_dir: data_dir.display().to_string(),
        train_hash: train_ds.content_hash(),
        test_hash: test_ds.map(LabeledDataset::content_hash),
        best_epoch: run.best_epoch,
    };
    io::write_run_manifest(&dir.join("run.json"), &manifest)?;
    Ok(())
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let (train_ds, test_ds) = resolve_data(&args.data)?;
    let config: TrainConfig = match &args.config {
        Some(path) => io::read_json(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    let run = train(&train_ds, test_ds.as_ref(), &config)?;
    write_run_dir(&args.out, &run, &train_ds, test_ds.as_ref(), &args.data)?;

    let last = run.report.last().expect("at least one epoch");
    print!(
        "{} epochs done: train acc {:.4}",
        run.report.len(),
        last.train_acc
    );
    if let (Some(erm), Some(ncm)) = (last.test_acc_erm, last.test_acc_ncm) {
        print!(", test acc {erm:.4} (ncm {ncm:.4})");
        if let Some(best) = run.best_epoch {
            print!(", best epoch {best}");
        }
    }
    println!();
    println!("run directory: {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TestMetrics {
    balanced_acc_erm: f64,
    micro_acc_erm: f64,
    balanced_acc_ncm: f64,
    per_class_recall_erm: Vec<f64>,
    per_class_recall_ncm: Vec<f64>,
    recall_std_erm: f64,
    recall_std_ncm: f64,
    shots_erm: ShotRecalls,
    shots_ncm: ShotRecalls,
}

#[derive(Debug, Serialize)]
struct DetectionMetrics {
    overall: DetectionScore,
    many: DetectionScore,
    medium: DetectionScore,
    few: DetectionScore,
}

#[derive(Debug, Serialize)]
struct Metrics {
    best_epoch: Option<usize>,
    epochs: usize,
    final_train_acc: f64,
    test: Option<TestMetrics>,
    detection: Option<DetectionMetrics>,
}

/// Flags from a split.csv flag column, ordered by example index.
fn read_split_flags(path: &Path, expected: usize) -> anyhow::Result<Vec<bool>> {
    let text = fs::read_to_string(path)?;
    let mut flags = Vec::with_capacity(expected);
    for (row, line) in text.lines().skip(1).enumerate() {
        let flag = line
            .split(',')
            .nth(2)
            .with_context(|| format!("split.csv row {row}: missing flag column"))?;
        match flag {
            "clean" => flags.push(true),
            "noisy" => flags.push(false),
            other => bail!("split.csv row {row}: unknown flag {other:?}"),
        }
    }
    if flags.len() != expected {
        bail!("split.csv has {} rows, dataset has {expected}", flags.len());
    }
    Ok(flags)
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let manifest = io::read_run_manifest(&args.run.join("run.json"))?;
    let data_dir = args
        .data
        .clone()
        .unwrap_or_else(|| PathBuf::from(&manifest.data_dir));
    let (train_ds, test_ds) = resolve_data(&data_dir)
        .with_context(|| format!("loading dataset recorded in run.json ({})", data_dir.display()))?;
    if train_ds.content_hash() != manifest.train_hash {
        bail!(
            "training data at {} does not match the run (content hash differs)",
            data_dir.display()
        );
    }
    let model = io::read_model(&args.run.join("model.json"))?;
    let (protos, _) = io::read_prototypes(&args.run.join("prototypes.json"))?;
    let report = io::read_report(&args.run.join("report.csv"))?;
    let last = report.last().context("report.csv has no epochs")?;

    let counts = train_ds.class_counts();
    let shots = shot_split(&counts, DEFAULT_MANY_OVER, DEFAULT_FEW_UNDER)?;

    let test = match &test_ds {
        Some(test_ds) => {
            let k = train_ds.class_count;
            let erm = balanced_accuracy(
                &model.predict(&test_ds.embeddings.view())?,
                &test_ds.noisy_labels,
                k,
            )?;
            let ncm_preds = argmax_rows(&ncm_logits(&test_ds.embeddings.view(), &protos)?);
            let ncm = balanced_accuracy(&ncm_preds, &test_ds.noisy_labels, k)?;
            Some(build_test_metrics(&erm, &ncm, &shots))
        }
        None => None,
    };

    let split_path = args.run.join("split.csv");
    let detection = if train_ds.true_labels.is_some() && split_path.exists() {
        let flags = read_split_flags(&split_path, train_ds.len())?;
        Some(DetectionMetrics {
            overall: detection_scores(&flags, &train_ds)?,
            many: detection_scores_for_classes(&flags, &train_ds, &shots.many)?,
            medium: detection_scores_for_classes(&flags, &train_ds, &shots.medium)?,
            few: detection_scores_for_classes(&flags, &train_ds, &shots.few)?,
        })
    } else {
        None
    };

    let metrics = Metrics {
        best_epoch: manifest.best_epoch,
        epochs: report.len(),
        final_train_acc: last.train_acc,
        test,
        detection,
    };
    io::write_json(&args.run.join("metrics.json"), &metrics)?;
    print_metrics(&metrics);
    println!("wrote {}", args.run.join("metrics.json").display());
    Ok(())
}

fn build_test_metrics(
    erm: &BalancedAccuracy,
    ncm: &BalancedAccuracy,
    shots: &ShotSplit,
) -> TestMetrics {
    TestMetrics {
        balanced_acc_erm: erm.balanced,
        micro_acc_erm: erm.micro,
        balanced_acc_ncm: ncm.balanced,
        per_class_recall_erm: erm.per_class_recall.clone(),
        per_class_recall_ncm: ncm.per_class_recall.clone(),
        recall_std_erm: recall_std(&erm.per_class_recall),
        recall_std_ncm: recall_std(&ncm.per_class_recall),
        shots_erm: split_recalls(&erm.per_class_recall, shots),
        shots_ncm: split_recalls(&ncm.per_class_recall, shots),
    }
}

fn print_metrics(metrics: &Metrics) {
    println!(
        "epochs {}, final train acc {:.4}, best epoch {}",
        metrics.epochs,
        metrics.final_train_acc,
        metrics
            .best_epoch
            .map_or_else(|| "-".into(), |e| e.to_string())
    );
    let f4 = |v: f64| {
        if v.is_nan() {
            "-".to_string()
        } else {
            format!("{v:.4}")
        }
    };
    if let Some(t) = &metrics.test {
        println!("                 balanced    many  medium     few  recall-std");
        println!(
            "test acc (erm)     {:>6}  {:>6}  {:>6}  {:>6}      {:>6}",
            f4(t.balanced_acc_erm),
            f4(t.shots_erm.many),
            f4(t.shots_erm.medium),
            f4(t.shots_erm.few),
            f4(t.recall_std_erm)
        );
        println!(
            "test acc (ncm)     {:>6}  {:>6}  {:>6}  {:>6}      {:>6}",
            f4(t.balanced_acc_ncm),
            f4(t.shots_ncm.many),
            f4(t.shots_ncm.medium),
            f4(t.shots_ncm.few),
            f4(t.recall_std_ncm)
        );
    }
    if let Some(d) = &metrics.detection {
        println!(
            "clean selection: precision {:.4}, recall {:.4} (many {:.4}/{:.4}, medium {:.4}/{:.4}, few {:.4}/{:.4})",
            d.overall.precision,
            d.overall.recall,
            d.many.precision,
            d.many.recall,
            d.medium.precision,
            d.medium.recall,
            d.few.precision,
            d.few.recall
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    /// Warm-up-only training on the observed labels, matched epoch budget.
    Erm,
    ErmDrw,
    Rolt,
    RoltDrw,
}

impl Method {
    const ALL: [Method; 4] = [Method::Erm, Method::ErmDrw, Method::Rolt, Method::RoltDrw];

    fn label(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::ErmDrw => "erm-drw",
            Method::Rolt => "rolt",
            Method::RoltDrw => "rolt-drw",
        }
    }

    /// Baselines spend the whole epoch budget in warm-up so every method
    /// sees the same number of passes over the data.
    fn config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut config = base.clone();
        config.seed = seed;
        if matches!(self, Method::Erm | Method::ErmDrw) {
            config.warmup_epochs = base.warmup_epochs + base.robust_epochs;
            config.robust_epochs = 0;
        }
        config.drw_enabled = matches!(self, Method::ErmDrw | Method::RoltDrw);
        config
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GridSpec {
    classes: usize,
    base: usize,
    dim: usize,
    separation: f64,
    test_per_class: usize,
    rhos: Vec<f64>,
    gammas: Vec<f64>,
    seeds: Vec<u64>,
    methods: Vec<Method>,
    train: TrainConfig,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            base: 1000,
            dim: 32,
            separation: 6.0,
            test_per_class: 200,
            rhos: vec![10.0, 100.0],
            gammas: vec![0.2, 0.5],
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

fn cell_name(rho: f64, gamma: f64, seed: u64, method: Method) -> String {
    format!("rho{rho}_gamma{gamma}_seed{seed}_{}", method.label())
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let spec: GridSpec = io::read_json(&args.grid)
        .with_context(|| format!("reading grid {}", args.grid.display()))?;
    fs::create_dir_all(&args.out)?;
    io::write_json(&args.out.join("grid.json"), &spec)?;

    let mut runs = csv_writer(&args.out.join("runs.csv"))?;
    writeln!(
        runs,
        "rho,gamma,seed,method,final_acc_erm,final_acc_ncm,best_acc_erm,best_epoch,\
         many_erm,medium_erm,few_erm,many_ncm,medium_ncm,few_ncm,detect_precision,detect_recall"
    )?;

    for &rho in &spec.rhos {
        for &gamma in &spec.gammas {
            for &seed in &spec.seeds {
                let config = SynthConfig {
                    profile: ClassProfile::new(spec.classes, spec.base, rho),
                    dim: spec.dim,
                    separation: spec.separation,
                    test_per_class: spec.test_per_class,
                    seed,
                };
                let data = noisy_blobs(&config, gamma)?;
                let data_dir = args.out.join("data").join(format!(
                    "rho{rho}_gamma{gamma}_seed{seed}"
                ));
                io::write_dataset(&data_dir.join("train"), &data.train, Some(seed), Some(config.profile))?;
                io::write_dataset(&data_dir.join("test"), &data.test, Some(seed), None)?;

                let shots = shot_split(
                    &data.train.class_counts(),
                    DEFAULT_MANY_OVER,
                    DEFAULT_FEW_UNDER,
                )?;
                for &method in &spec.methods {
                    let run = train(
                        &data.train,
                        Some(&data.test),
                        &method.config(&spec.train, seed),
                    )?;
                    let dir = args.out.join(cell_name(rho, gamma, seed, method));
                    write_run_dir(&dir, &run, &data.train, Some(&data.test), &data_dir)?;
                    writeln!(runs, "{}", summary_row(rho, gamma, seed, method, &run, &shots))?;
                    let last = run.report.last().expect("at least one epoch");
                    println!(
                        "rho={rho} gamma={gamma} seed={seed} {}: final {:.4}{}",
                        method.label(),
                        last.test_acc_erm.unwrap_or(f64::NAN),
                        run.best_epoch
                            .map_or_else(String::new, |e| format!(" (best epoch {e})"))
                    );
                }
            }
        }
    }
    runs.flush()?;
    println!("sweep complete: {}", args.out.display());
    Ok(())
}

fn csv_writer(path: &Path) -> anyhow::Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

fn summary_row(
    rho: f64,
    gamma: f64,
    seed: u64,
    method: Method,
    run: &TrainOutput,
    shots: &ShotSplit,
) -> String {
    let last = run.report.last().expect("at least one epoch");
    let erm_shots = split_recalls(&last.erm_recalls, shots);
    let ncm_shots = split_recalls(&last.ncm_recalls, shots);
    let best_acc = run
        .best_epoch
        .and_then(|e| run.report.iter().find(|r| r.epoch == e))
        .and_then(|r| r.test_acc_erm);
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    format!(
        "{rho},{gamma},{seed},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        method.label(),
        opt(last.test_acc_erm),
        opt(last.test_acc_ncm),
        opt(best_acc),
        run.best_epoch.map_or_else(String::new, |e| e.to_string()),
        erm_shots.many,
        erm_shots.medium,
        erm_shots.few,
        ncm_shots.many,
        ncm_shots.medium,
        ncm_shots.few,
        opt(last.detect_precision),
        opt(last.detect_recall),
    )
}

/// Seed-averaged final-epoch view of one sweep cell.
struct CellSummary {
    rho: f64,
    gamma: f64,
    method: Method,
    final_acc: f64,
    erm_recalls: Vec<f64>,
    ncm_recalls: Vec<f64>,
    detect: Option<(f64, f64)>,
}

fn run_report(args: ReportArgs) -> anyhow::Result<()> {
    let spec: GridSpec = io::read_json(&args.grid.join("grid.json"))
        .with_context(|| "reading grid.json from the sweep directory")?;
    let out_dir = args.out.unwrap_or_else(|| args.grid.clone());
    fs::create_dir_all(&out_dir)?;

    let mut cells = Vec::new();
    for &rho in &spec.rhos {
        for &gamma in &spec.gammas {
            for &method in &spec.methods {
                let mut finals = Vec::new();
                let mut erm_sum = vec![0.0; spec.classes];
                let mut ncm_sum = vec![0.0; spec.classes];
                let mut detect_acc = Vec::new();
                for &seed in &spec.seeds {
                    let dir = args.grid.join(cell_name(rho, gamma, seed, method));
                    let report = io::read_report(&dir.join("report.csv"))
                        .with_context(|| format!("missing cell {}", dir.display()))?;
                    let last: &EpochRecord = report.last().context("empty report")?;
                    finals.push(last.test_acc_erm.context("cell has no test accuracy")?);
                    for (k, &r) in last.erm_recalls.iter().enumerate() {
                        erm_sum[k] += r;
                    }
                    for (k, &r) in last.ncm_recalls.iter().enumerate() {
                        ncm_sum[k] += r;
                    }
                    if let (Some(p), Some(r)) = (last.detect_precision, last.detect_recall) {
                        detect_acc.push((p, r));
                    }
                }
                let n = spec.seeds.len() as f64;
                cells.push(CellSummary {
                    rho,
                    gamma,
                    method,
                    final_acc: finals.iter().sum::<f64>() / n,
                    erm_recalls: erm_sum.iter().map(|s| s / n).collect(),
                    ncm_recalls: ncm_sum.iter().map(|s| s / n).collect(),
                    detect: (detect_acc.len() == spec.seeds.len()).then(|| {
                        let m = detect_acc.len() as f64;
                        (
                            detect_acc.iter().map(|d| d.0).sum::<f64>() / m,
                            detect_acc.iter().map(|d| d.1).sum::<f64>() / m,
                        )
                    }),
                });
            }
        }
    }

    write_table1(&out_dir.join("table1.csv"), &spec, &cells)?;
    write_per_class(&out_dir.join("per_class.csv"), &spec, &cells)?;
    write_detection(&out_dir.join("detection.csv"), &cells)?;
    println!(
        "wrote table1.csv, per_class.csv, detection.csv to {}",
        out_dir.display()
    );
    Ok(())
}

/// Methods as rows, (rho, gamma) cells as columns, seed-averaged final
/// balanced accuracy as values. Printed as well as written.
fn write_table1(path: &Path, spec: &GridSpec, cells: &[CellSummary]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    write!(w, "method")?;
    print!("{:<10}", "method");
    for &rho in &spec.rhos {
        for &gamma in &spec.gammas {
            write!(w, ",rho{rho}_gamma{gamma}")?;
            print!("  {:>14}", format!("rho{rho}/g{gamma}"));
        }
    }
    writeln!(w)?;
    println!();
    for &method in &spec.methods {
        write!(w, "{}", method.label())?;
        print!("{:<10}", method.label());
        for &rho in &spec.rhos {
            for &gamma in &spec.gammas {
                let cell = cells
                    .iter()
                    .find(|c| c.rho == rho && c.gamma == gamma && c.method == method)
                    .expect("every cell was aggregated");
                write!(w, ",{}", cell.final_acc)?;
                print!("  {:>14.4}", cell.final_acc);
            }
        }
        writeln!(w)?;
        println!();
    }
    w.flush()?;
    Ok(())
}

fn write_per_class(path: &Path, spec: &GridSpec, cells: &[CellSummary]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "rho,gamma,method,class,train_count,erm_recall,ncm_recall")?;
    for cell in cells {
        let counts = long_tailed_counts(&ClassProfile::new(spec.classes, spec.base, cell.rho))?;
        for k in 0..spec.classes {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                cell.rho,
                cell.gamma,
                cell.method.label(),
                k + 1,
                counts[k],
                cell.erm_recalls[k],
                cell.ncm_recalls[k]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_detection(path: &Path, cells: &[CellSummary]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "rho,gamma,method,precision,recall")?;
    for cell in cells {
        if let Some((p, r)) = cell.detect {
            writeln!(
                w,
                "{},{},{},{p},{r}",
                cell.rho,
                cell.gamma,
                cell.method.label()
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
