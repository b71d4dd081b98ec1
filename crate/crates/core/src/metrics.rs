//! Evaluation measures: classification accuracy and the RBF maximum mean
//! discrepancy used to quantify distribution distances along the
//! transition.

use crate::domains::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{Classifier, DomainTag, FeatureBatch, FeatureExtractor};
use crate::numerics::tensor::Tensor;

/// Gaussian-kernel MMD configuration. The biased estimator is used
/// throughout: it is non-negative by construction, which keeps the
/// monotone-profile checks well-defined.
#[derive(Debug, Clone, Copy, Default)]
pub struct MmdConfig {
    /// Explicit kernel bandwidth; `None` selects the median heuristic on
    /// the pooled sample.
    pub bandwidth: Option<f64>,
}

impl MmdConfig {
    pub fn with_bandwidth(h: f64) -> Result<MmdConfig> {
        if h <= 0.0 {
            return Err(Error::invalid("MmdConfig", "bandwidth must be > 0"));
        }
        Ok(MmdConfig { bandwidth: Some(h) })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over the pooled sample.
fn median_heuristic(x: &Tensor, y: &Tensor) -> f64 {
    let mut dists = Vec::new();
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = dists[dists.len() / 2];
    med.sqrt().max(1e-12)
}

/// Biased squared-MMD estimator with Gaussian kernel
/// exp(-||a-b||^2 / (2 h^2)).
pub fn rbf_mmd2(x: &Tensor, y: &Tensor, cfg: MmdConfig) -> Result<f64> {
    if !x.is_matrix() || !y.is_matrix() || x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "rbf_mmd2",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::invalid(
            "rbf_mmd2",
            "need at least 2 samples on each side",
        ));
    }
    // canonicalize argument order so mmd2(x, y) == mmd2(y, x) bit-exactly
    // despite floating-point summation order
    let swap = match x.rows().cmp(&y.rows()) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => {
            let xb = x.data().iter().map(|v| v.to_bits());
            let yb = y.data().iter().map(|v| v.to_bits());
            xb.cmp(yb) == std::cmp::Ordering::Greater
        }
    };
    let (x, y) = if swap { (y, x) } else { (x, y) };
    let h = match cfg.bandwidth {
        Some(h) => h,
        None => median_heuristic(x, y),
    };
    let gamma = 1.0 / (2.0 * h * h);
    let mean_kernel = |a: &Tensor, b: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                s += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    let v = mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y);
    // the biased form is a squared RKHS norm; clamp float dust
    Ok(v.max(0.0))
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(
            "accuracy",
            format!("{} logit rows for {} labels", logits.rows(), labels.len()),
        ));
    }
    let hits = (0..logits.rows())
        .filter(|&i| argmax_row(logits.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of argmax-logit predictions matching the labels, along the
/// inference path: extractor then classifier, diffusion removed.
pub fn accuracy(c: &Classifier, fe: &FeatureExtractor, d: &LabeledDataset) -> Result<f64> {
    if d.len() == 0 {
        return Err(Error::invalid("accuracy", "empty dataset"));
    }
    let feats = fe.extract(&d.points, DomainTag::Target, None)?;
    let logits = c.classify(&FeatureBatch::new(feats.features, None, DomainTag::Target)?)?;
    accuracy_from_logits(&logits, &d.labels)
}
