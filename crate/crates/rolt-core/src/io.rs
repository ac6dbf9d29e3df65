//! On-disk formats.
//!
//! A dataset is a directory holding `meta.json`, `embeddings.f64` (two
//! little-endian u64 header words `N`, `D`, then `N*D` row-major
//! little-endian f64 values), and `noisy_labels.csv` / `true_labels.csv`
//! with one **1-based** class index per line (no header). A plain
//! `embeddings.csv` (`N` rows of `D` comma-separated values) is accepted
//! on import when the binary file is absent.
//!
//! Label columns in every exported CSV are 1-based to match; example
//! indices are 0-based row positions into the embedding matrix. Floats are
//! written with Rust's shortest-roundtrip formatting, so rereading a file
//! reproduces the values bit for bit and identical runs produce identical
//! bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitTag};
use crate::datasim::ClassProfile;
use crate::detect::DetectionResult;
use crate::error::{Result, RoltError};
use crate::model::LinearModel;
use crate::prototypes::Prototypes;
use crate::pseudolabel::RelabelOutcome;
use crate::trainer::{EpochRecord, Stage, TrainConfig};

fn malformed(path: &Path, reason: impl Into<String>) -> RoltError {
    RoltError::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Serialize any value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)
        .map_err(|e| malformed(path, format!("cannot open: {e}")))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| malformed(path, format!("bad JSON: {e}")))
}

/// Sidecar describing a stored dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_count: usize,
    pub example_count: usize,
    pub dim: usize,
    pub split_tag: SplitTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ClassProfile>,
}

fn write_label_column(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &y in labels {
        writeln!(w, "{}", y + 1)?;
    }
    w.flush()?;
    Ok(())
}

fn read_label_column(path: &Path, class_count: usize) -> Result<Vec<usize>> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let value: usize = line.trim().parse().map_err(|_| {
            malformed(path, format!("line {}: not an integer: {line:?}", lineno + 1))
        })?;
        if value == 0 || value > class_count {
            return Err(malformed(
                path,
                format!(
                    "line {}: label {value} outside 1..={class_count}",
                    lineno + 1
                ),
            ));
        }
        labels.push(value - 1);
    }
    Ok(labels)
}

fn write_embeddings_f64(path: &Path, embeddings: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u64::<LittleEndian>(embeddings.nrows() as u64)?;
    w.write_u64::<LittleEndian>(embeddings.ncols() as u64)?;
    for &v in embeddings.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

fn read_embeddings_f64(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let n = r.read_u64::<LittleEndian>().map_err(|_| {
        malformed(path, "missing row-count header word")
    })? as usize;
    let d = r.read_u64::<LittleEndian>().map_err(|_| {
        malformed(path, "missing column-count header word")
    })? as usize;
    let total = n.checked_mul(d).ok_or_else(|| {
        malformed(path, format!("implausible shape {n} x {d}"))
    })?;
    let mut values = Vec::with_capacity(total);
    for i in 0..total {
        values.push(r.read_f64::<LittleEndian>().map_err(|_| {
            malformed(path, format!("truncated: expected {total} values, got {i}"))
        })?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(malformed(path, "trailing bytes after the declared shape"));
    }
    Array2::from_shape_vec((n, d), values)
        .map_err(|e| malformed(path, format!("shape error: {e}")))
}

fn read_embeddings_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record?;
        if let Some(w) = width {
            if record.len() != w {
                return Err(malformed(
                    path,
                    format!("row {rows} has {} fields, expected {w}", record.len()),
                ));
            }
        } else {
            width = Some(record.len());
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                malformed(path, format!("row {rows}: not a number: {field:?}"))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let width = width.unwrap_or(0);
    Array2::from_shape_vec((rows, width), values)
        .map_err(|e| malformed(path, format!("shape error: {e}")))
}

/// Write a dataset directory (`meta.json`, `embeddings.f64`, label columns).
pub fn write_dataset(
    dir: &Path,
    dataset: &LabeledDataset,
    seed: Option<u64>,
    profile: Option<ClassProfile>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        class_count: dataset.class_count,
        example_count: dataset.len(),
        dim: dataset.dim(),
        split_tag: dataset.split_tag,
        seed,
        profile,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_embeddings_f64(&dir.join("embeddings.f64"), &dataset.embeddings)?;
    write_label_column(&dir.join("noisy_labels.csv"), &dataset.noisy_labels)?;
    if let Some(truth) = &dataset.true_labels {
        write_label_column(&dir.join("true_labels.csv"), truth)?;
    }
    Ok(())
}

/// Read a dataset directory; falls back to `embeddings.csv` when the
/// binary matrix is absent. Shape and label ranges are validated against
/// `meta.json`.
pub fn read_dataset(dir: &Path) -> Result<(LabeledDataset, DatasetMeta)> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let binary = dir.join("embeddings.f64");
    let embeddings = if binary.exists() {
        read_embeddings_f64(&binary)?
    } else {
        let csv_path = dir.join("embeddings.csv");
        if !csv_path.exists() {
            return Err(malformed(
                &binary,
                "neither embeddings.f64 nor embeddings.csv present",
            ));
        }
        read_embeddings_csv(&csv_path)?
    };
    if embeddings.nrows() != meta.example_count || embeddings.ncols() != meta.dim {
        return Err(malformed(
            &dir.join("meta.json"),
            format!(
                "meta declares {} x {}, embeddings are {} x {}",
                meta.example_count,
                meta.dim,
                embeddings.nrows(),
                embeddings.ncols()
            ),
        ));
    }
    let noisy_path = dir.join("noisy_labels.csv");
    let noisy_labels = read_label_column(&noisy_path, meta.class_count)?;
    if noisy_labels.len() != meta.example_count {
        return Err(malformed(
            &noisy_path,
            format!(
                "{} labels for {} examples",
                noisy_labels.len(),
                meta.example_count
            ),
        ));
    }
    let truth_path = dir.join("true_labels.csv");
    let true_labels = if truth_path.exists() {
        let t = read_label_column(&truth_path, meta.class_count)?;
        if t.len() != meta.example_count {
            return Err(malformed(
                &truth_path,
                format!("{} labels for {} examples", t.len(), meta.example_count),
            ));
        }
        Some(t)
    } else {
        None
    };
    let dataset = LabeledDataset::new(
        embeddings,
        noisy_labels,
        true_labels,
        meta.class_count,
        meta.split_tag,
    )?;
    Ok((dataset, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    class_count: usize,
    dim: usize,
    /// Row-major `class_count x dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

pub fn write_model(path: &Path, model: &LinearModel) -> Result<()> {
    write_json(
        path,
        &ModelFile {
            class_count: model.class_count(),
            dim: model.dim(),
            weights: model.weights.iter().copied().collect(),
            bias: model.bias.to_vec(),
        },
    )
}

pub fn read_model(path: &Path) -> Result<LinearModel> {
    let file: ModelFile = read_json(path)?;
    if file.weights.len() != file.class_count * file.dim || file.bias.len() != file.class_count {
        return Err(malformed(path, "weight/bias lengths disagree with shape"));
    }
    Ok(LinearModel {
        weights: Array2::from_shape_vec((file.class_count, file.dim), file.weights)
            .map_err(|e| malformed(path, e.to_string()))?,
        bias: file.bias.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrototypesFile {
    class_count: usize,
    dim: usize,
    /// Row-major `class_count x dim` unit (or fallback) directions.
    centers: Vec<f64>,
    /// Member count per class at computation time.
    counts: Vec<usize>,
    /// True for classes whose prototype came from a fallback.
    degenerate: Vec<bool>,
}

pub fn write_prototypes(path: &Path, protos: &Prototypes, counts: &[usize]) -> Result<()> {
    let k = protos.class_count();
    let degenerate: Vec<bool> = (0..k)
        .map(|c| protos.fallback_classes.contains(&c))
        .collect();
    write_json(
        path,
        &PrototypesFile {
            class_count: k,
            dim: protos.dim(),
            centers: protos.vectors.iter().copied().collect(),
            counts: counts.to_vec(),
            degenerate,
        },
    )
}

pub fn read_prototypes(path: &Path) -> Result<(Prototypes, Vec<usize>)> {
    let file: PrototypesFile = read_json(path)?;
    if file.centers.len() != file.class_count * file.dim {
        return Err(malformed(path, "center count disagrees with shape"));
    }
    let vectors = Array2::from_shape_vec((file.class_count, file.dim), file.centers)
        .map_err(|e| malformed(path, e.to_string()))?;
    let fallback_classes = file
        .degenerate
        .iter()
        .enumerate()
        .filter_map(|(k, &d)| d.then_some(k))
        .collect();
    Ok((
        Prototypes {
            vectors,
            fallback_classes,
        },
        file.counts,
    ))
}

/// Per-example detector verdicts: index, assigned (observed) label, flag,
/// distance to the class prototype, and the two component densities at
/// that distance (NaN when the class was too small for a fit).
pub fn write_split(path: &Path, detection: &DetectionResult, dataset: &LabeledDataset) -> Result<()> {
    let n = dataset.len();
    let mut rows: Vec<Option<(usize, bool, f64, f64, f64)>> = vec![None; n];
    for pc in &detection.per_class {
        for (pos, &i) in pc.indices.iter().enumerate() {
            let d = pc.distances[pos];
            let (d1, d2) = match &pc.fit {
                Some(fit) => {
                    let [l1, l2] = fit.component_log_densities(d);
                    (l1.exp(), l2.exp())
                }
                None => (f64::NAN, f64::NAN),
            };
            rows[i] = Some((pc.class, pc.clean[pos], d, d1, d2));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "example_index,assigned_label,flag,distance,component1_density,component2_density"
    )?;
    for (i, row) in rows.iter().enumerate() {
        let (class, clean, d, d1, d2) =
            row.ok_or_else(|| malformed(path, format!("example {i} missing from detection")))?;
        writeln!(
            w,
            "{i},{},{},{d},{d1},{d2}",
            class + 1,
            if clean { "clean" } else { "noisy" }
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Final-epoch target export: flag, original label, both guesses, then the
/// K soft-label columns (one-hot for clean examples).
pub fn write_labels(
    path: &Path,
    relabel: &RelabelOutcome,
    clean_mask: &[bool],
    noisy_labels: &[usize],
) -> Result<()> {
    let k = relabel.targets.ncols();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "example_index,flag,original_label,erm_guess,ncm_guess")?;
    for c in 1..=k {
        write!(w, ",soft_{c}")?;
    }
    writeln!(w)?;
    for i in 0..relabel.targets.nrows() {
        write!(
            w,
            "{i},{},{},{},{}",
            if clean_mask[i] { "clean" } else { "noisy" },
            noisy_labels[i] + 1,
            relabel.erm_guess[i] + 1,
            relabel.ncm_guess[i] + 1
        )?;
        for &p in relabel.targets.row(i) {
            write!(w, ",{p}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-class mixture fits from a detection pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFitFile {
    pub class: usize,
    pub member_count: usize,
    pub clean_count: usize,
    pub fit: Option<crate::gmm::GmmFit>,
}

pub fn write_gmm(path: &Path, detection: &DetectionResult) -> Result<()> {
    let fits: Vec<ClassFitFile> = detection
        .per_class
        .iter()
        .map(|pc| ClassFitFile {
            class: pc.class,
            member_count: pc.indices.len(),
            clean_count: pc.clean.iter().filter(|&&c| c).count(),
            fit: pc.fit.clone(),
        })
        .collect();
    write_json(path, &fits)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, path: &Path, lineno: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| malformed(path, format!("line {lineno}: bad float {field:?}")))
}

/// Per-epoch training report. Recall columns are per class for the ERM
/// head and then the NCM classifier; cells are empty when the run had no
/// test split.
pub fn write_report(path: &Path, records: &[EpochRecord], class_count: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "epoch,stage,lr,loss,loss_clean,loss_noisy,clean_count,noisy_count,\
         drw_active,train_acc,detect_precision,detect_recall,test_acc_erm,test_acc_ncm"
    )?;
    for c in 1..=class_count {
        write!(w, ",erm_recall_{c}")?;
    }
    for c in 1..=class_count {
        write!(w, ",ncm_recall_{c}")?;
    }
    writeln!(w)?;
    for r in records {
        write!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.stage,
            r.lr,
            r.loss,
            r.loss_clean,
            r.loss_noisy,
            r.clean_count,
            r.noisy_count,
            r.drw_active,
            r.train_acc,
            fmt_opt(r.detect_precision),
            fmt_opt(r.detect_recall),
            fmt_opt(r.test_acc_erm),
            fmt_opt(r.test_acc_ncm),
        )?;
        for recalls in [&r.erm_recalls, &r.ncm_recalls] {
            for c in 0..class_count {
                match recalls.get(c) {
                    Some(v) => write!(w, ",{v}")?,
                    None => write!(w, ",")?,
                }
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<EpochRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed(path, "empty report"))??;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 14 || columns[0] != "epoch" {
        return Err(malformed(path, "unrecognized report header"));
    }
    let class_count = columns
        .iter()
        .filter(|c| c.starts_with("erm_recall_"))
        .count();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 + 2 * class_count {
            return Err(malformed(
                path,
                format!("line {lineno}: {} fields, expected {}", f.len(), 14 + 2 * class_count),
            ));
        }
        let bad = |what: &str| malformed(path, format!("line {lineno}: bad {what}"));
        let stage = match f[1] {
            "warmup" => Stage::Warmup,
            "robust" => Stage::Robust,
            other => return Err(malformed(path, format!("line {lineno}: bad stage {other:?}"))),
        };
        let collect_recalls = |fields: &[&str]| -> Vec<f64> {
            let parsed: Vec<f64> = fields
                .iter()
                .filter(|s| !s.is_empty())
                .filter_map(|s| s.parse().ok())
                .collect();
            parsed
        };
        let erm_fields = &f[14..14 + class_count];
        let ncm_fields = &f[14 + class_count..];
        let erm_recalls = collect_recalls(erm_fields);
        let ncm_recalls = collect_recalls(ncm_fields);
        records.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            stage,
            lr: f[2].parse().map_err(|_| bad("lr"))?,
            loss: f[3].parse().map_err(|_| bad("loss"))?,
            loss_clean: f[4].parse().map_err(|_| bad("loss_clean"))?,
            loss_noisy: f[5].parse().map_err(|_| bad("loss_noisy"))?,
            clean_count: f[6].parse().map_err(|_| bad("clean_count"))?,
            noisy_count: f[7].parse().map_err(|_| bad("noisy_count"))?,
            drw_active: f[8].parse().map_err(|_| bad("drw_active"))?,
            train_acc: f[9].parse().map_err(|_| bad("train_acc"))?,
            detect_precision: parse_opt(f[10], path, lineno)?,
            detect_recall: parse_opt(f[11], path, lineno)?,
            test_acc_erm: parse_opt(f[12], path, lineno)?,
            test_acc_ncm: parse_opt(f[13], path, lineno)?,
            erm_recalls,
            ncm_recalls,
        });
    }
    Ok(records)
}

/// Provenance sidecar for a run directory, tying outputs back to the data
/// and configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub data_dir: String,
    /// Content fingerprint of the training split ([`LabeledDataset::content_hash`]).
    pub train_hash: u64,
    pub test_hash: Option<u64>,
    pub best_epoch: Option<usize>,
}

pub fn write_run_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(path, manifest)
}

pub fn read_run_manifest(path: &Path) -> Result<RunManifest> {
    read_json(path)
}
