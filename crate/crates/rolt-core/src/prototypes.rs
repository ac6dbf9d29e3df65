//! Class prototypes: unit-normalized means of the embeddings currently
//! assigned to each class, plus squared-distance machinery shared by the
//! noise detector and the nearest-class-mean classifier.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoltError};

/// One unit-norm row per class. `fallback_classes` lists classes that had
/// no assigned examples and inherited a substitute vector instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub vectors: Array2<f64>,
    pub fallback_classes: Vec<usize>,
}

impl Prototypes {
    pub fn class_count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn normalized_or_zero(v: &mut Array1<f64>) {
    let norm = v.dot(v).sqrt();
    if norm > 1e-12 {
        v.mapv_inplace(|x| x / norm);
    }
}

/// Mean-then-normalize prototype per class. A class with no assigned
/// examples falls back to its row in `previous` when given, otherwise to
/// the normalized global mean; either way it is recorded in
/// `fallback_classes`.
pub fn compute_prototypes(
    embeddings: &ArrayView2<f64>,
    labels: &[usize],
    class_count: usize,
    previous: Option<&Prototypes>,
) -> Result<Prototypes> {
    let n = embeddings.nrows();
    let dim = embeddings.ncols();
    if labels.len() != n {
        return Err(RoltError::DimensionMismatch(format!(
            "{} labels vs {} embedding rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(RoltError::DimensionMismatch(
            "cannot build prototypes from zero examples".into(),
        ));
    }
    if let Some(prev) = previous {
        if prev.class_count() != class_count || prev.dim() != dim {
            return Err(RoltError::DimensionMismatch(format!(
                "previous prototypes are {}x{}, want {}x{}",
                prev.class_count(),
                prev.dim(),
                class_count,
                dim
            )));
        }
    }
    let mut sums = Array2::<f64>::zeros((class_count, dim));
    let mut counts = vec![0usize; class_count];
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_count {
            return Err(RoltError::InvalidTarget(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        let row = embeddings.row(i);
        for d in 0..dim {
            sums[(y, d)] += row[d];
        }
        counts[y] += 1;
    }
    let mut global_mean: Option<Array1<f64>> = None;
    let mut vectors = Array2::zeros((class_count, dim));
    let mut fallback_classes = Vec::new();
    for k in 0..class_count {
        let mut proto = if counts[k] > 0 {
            let mut mean = sums.row(k).to_owned();
            mean.mapv_inplace(|v| v / counts[k] as f64);
            mean
        } else {
            fallback_classes.push(k);
            match previous {
                Some(prev) => prev.vectors.row(k).to_owned(),
                None => global_mean
                    .get_or_insert_with(|| {
                        let mut mean = embeddings.sum_axis(ndarray::Axis(0));
                        mean.mapv_inplace(|v| v / n as f64);
                        normalized_or_zero(&mut mean);
                        mean
                    })
                    .clone(),
            }
        };
        if counts[k] > 0 {
            normalized_or_zero(&mut proto);
        }
        vectors.row_mut(k).assign(&proto);
    }
    Ok(Prototypes {
        vectors,
        fallback_classes,
    })
}

/// `N x K` matrix of squared Euclidean distances to every prototype.
pub fn squared_distances(
    embeddings: &ArrayView2<f64>,
    protos: &Prototypes,
) -> Result<Array2<f64>> {
    if embeddings.ncols() != protos.dim() {
        return Err(RoltError::DimensionMismatch(format!(
            "embeddings have dim {}, prototypes {}",
            embeddings.ncols(),
            protos.dim()
        )));
    }
    let n = embeddings.nrows();
    let k = protos.class_count();
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let x = embeddings.row(i);
        for c in 0..k {
            let p = protos.vectors.row(c);
            let d: f64 = x
                .iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[(i, c)] = d;
        }
    }
    Ok(out)
}

/// Squared distance of each example to the prototype of its own label.
pub fn own_class_distances(
    embeddings: &ArrayView2<f64>,
    labels: &[usize],
    protos: &Prototypes,
) -> Result<Vec<f64>> {
    if labels.len() != embeddings.nrows() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} labels vs {} embedding rows",
            labels.len(),
            embeddings.nrows()
        )));
    }
    let mut out = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= protos.class_count() {
            return Err(RoltError::InvalidTarget(format!(
                "label {y} out of range for {} classes",
                protos.class_count()
            )));
        }
        let x = embeddings.row(i);
        let p = protos.vectors.row(y);
        let d: f64 = x
            .iter()
            .zip(p.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        out.push(d);
    }
    Ok(out)
}

/// Nearest-class-mean scores: the negated squared distances, so softmax /
/// argmax machinery applies unchanged. Distance ties therefore resolve to
/// the smaller class index, like every other argmax here.
pub fn ncm_logits(embeddings: &ArrayView2<f64>, protos: &Prototypes) -> Result<Array2<f64>> {
    let mut d = squared_distances(embeddings, protos)?;
    d.mapv_inplace(|v| -v);
    Ok(d)
}

/// Angle in degrees between each prototype and a reference direction row.
/// Diagnostic for synthetic data where the generating centers are known.
pub fn prototype_angles_deg(protos: &Prototypes, reference: &Array2<f64>) -> Result<Vec<f64>> {
    if reference.dim() != protos.vectors.dim() {
        return Err(RoltError::DimensionMismatch(format!(
            "reference is {:?}, prototypes are {:?}",
            reference.dim(),
            protos.vectors.dim()
        )));
    }
    let mut out = Vec::with_capacity(protos.class_count());
    for (p, r) in protos.vectors.rows().into_iter().zip(reference.rows()) {
        let pn = p.dot(&p).sqrt();
        let rn = r.dot(&r).sqrt();
        if pn <= 1e-12 || rn <= 1e-12 {
            out.push(90.0);
            continue;
        }
        let cos = (p.dot(&r) / (pn * rn)).clamp(-1.0, 1.0);
        out.push(cos.acos().to_degrees());
    }
    Ok(out)
}
