//! Seeded synthetic dataset generators producing source/target domain
//! pairs with controllable shift magnitude and shared label semantics.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Tensor, // n x input_dim
    pub labels: Vec<usize>,
    pub domain_name: String,
    /// Human-readable record of the generator and any shift applied.
    pub generator_params: String,
}

impl LabeledDataset {
    pub fn new(
        points: Tensor,
        labels: Vec<usize>,
        domain_name: impl Into<String>,
        generator_params: impl Into<String>,
    ) -> Result<LabeledDataset> {
        if !points.is_matrix() || points.rows() == 0 || points.rows() != labels.len() {
            return Err(Error::invalid(
                "LabeledDataset",
                format!("{:?} points for {} labels", points.shape(), labels.len()),
            ));
        }
        Ok(LabeledDataset {
            points,
            labels,
            domain_name: domain_name.into(),
            generator_params: generator_params.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Row subset, preserving label order.
    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.points.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.domain_name.clone(),
            format!("{} (subset)", self.generator_params),
        )
    }
}

/// Two interleaving half-circle classes in 2-D with Gaussian jitter.
/// Points are evenly spaced along each arc before jitter, so class counts
/// are balanced within one point.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::invalid("gen_two_moons", "need n >= 2"));
    }
    if noise_std < 0.0 {
        return Err(Error::invalid("gen_two_moons", "noise_std must be >= 0"));
    }
    let n0 = n / 2 + n % 2;
    let n1 = n / 2;
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let arc = |i: usize, m: usize| {
        if m == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    for i in 0..n0 {
        let t = arc(i, n0);
        data.push(t.cos() + noise_std * rng.normal());
        data.push(t.sin() + noise_std * rng.normal());
        labels.push(0);
    }
    for i in 0..n1 {
        let t = arc(i, n1);
        data.push(1.0 - t.cos() + noise_std * rng.normal());
        data.push(0.5 - t.sin() + noise_std * rng.normal());
        labels.push(1);
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 2], data)?,
        labels,
        "two_moons",
        format!("two_moons(n={n}, noise_std={noise_std}, seed={seed})"),
    )
}

/// Affine domain shift: x -> scale * R(rotation_deg) * x + translation,
/// with the rotation acting on the first two coordinates.
pub fn apply_shift(
    d: &LabeledDataset,
    rotation_deg: f64,
    translation: &[f64],
    scale: f64,
) -> Result<LabeledDataset> {
    if scale <= 0.0 {
        return Err(Error::invalid("apply_shift", "scale must be > 0"));
    }
    if translation.len() != d.dim() {
        return Err(Error::ShapeMismatch {
            op: "apply_shift",
            lhs: vec![translation.len()],
            rhs: vec![d.dim()],
        });
    }
    if d.dim() < 2 && rotation_deg != 0.0 {
        return Err(Error::invalid(
            "apply_shift",
            "rotation needs at least 2 dimensions",
        ));
    }
    let theta = rotation_deg.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let dim = d.dim();
    let mut data = d.points.data().to_vec();
    for row in data.chunks_mut(dim) {
        if dim >= 2 {
            let (x, y) = (row[0], row[1]);
            row[0] = c * x - s * y;
            row[1] = s * x + c * y;
        }
        for (v, t) in row.iter_mut().zip(translation) {
            *v = scale * *v + t;
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![d.len(), dim], data)?,
        d.labels.clone(),
        format!("{}_shifted", d.domain_name),
        format!(
            "{} | shift(rot={rotation_deg}, trans={translation:?}, scale={scale})",
            d.generator_params
        ),
    )
}

/// C spherical Gaussian clusters on a circle for the source; the target
/// translates each cluster by `mean_shift` along its fixed radial
/// direction.
pub fn gen_gaussian_mixture_pair(
    classes: usize,
    n: usize,
    mean_shift: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if classes < 2 {
        return Err(Error::invalid("gen_gaussian_mixture_pair", "need C >= 2"));
    }
    if n < classes {
        return Err(Error::invalid(
            "gen_gaussian_mixture_pair",
            "need at least one point per class",
        ));
    }
    let radius = 3.0;
    let std = 0.5;
    let base = Rng::new(seed);
    let gen = |domain: usize, shift: f64| -> Result<LabeledDataset> {
        let mut rng = base.substream(domain as u64 + 1);
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let cls = i % classes;
            let angle = 2.0 * std::f64::consts::PI * cls as f64 / classes as f64;
            let (dx, dy) = (angle.cos(), angle.sin());
            let cx = (radius + shift) * dx;
            let cy = (radius + shift) * dy;
            data.push(cx + std * rng.normal());
            data.push(cy + std * rng.normal());
            labels.push(cls);
        }
        LabeledDataset::new(
            Tensor::new(vec![n, 2], data)?,
            labels,
            if domain == 0 { "gmix_source" } else { "gmix_target" },
            format!("gaussian_mixture(C={classes}, n={n}, mean_shift={mean_shift}, seed={seed})"),
        )
    };
    Ok((gen(0, 0.0)?, gen(1, mean_shift)?))
}

/// Per-dimension affine standardization fitted on one domain (the source)
/// and applied unchanged to both.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(points: &Tensor) -> Standardizer {
        let (n, d) = (points.rows(), points.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(points.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(points.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).sqrt().max(1e-12))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, points: &Tensor) -> Result<Tensor> {
        let d = points.cols();
        if d != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                lhs: points.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        let mut data = points.data().to_vec();
        for row in data.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Tensor::new(points.shape().to_vec(), data)
    }

    pub fn apply_dataset(&self, d: &LabeledDataset) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.apply(&d.points)?,
            d.labels.clone(),
            d.domain_name.clone(),
            format!("{} (standardized)", d.generator_params),
        )
    }
}

/// Delimited-text export with header `x0,...,xd,label,domain`.
pub fn export_csv(d: &LabeledDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..d.dim()).map(|i| format!("x{i}")).collect();
    writeln!(f, "{},label,domain", header.join(","))?;
    for i in 0..d.len() {
        let row: Vec<String> = d.points.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{},{}", row.join(","), d.labels[i], d.domain_name)?;
    }
    Ok(())
}

pub fn import_csv(path: &Path) -> Result<LabeledDataset> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("import_csv", "empty file"))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "domain" {
        return Err(Error::invalid("import_csv", "bad header"));
    }
    let dim = cols.len() - 2;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain = String::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::invalid(
                "import_csv",
                format!("line {}: expected {} fields", lineno + 2, dim + 2),
            ));
        }
        for v in &fields[..dim] {
            data.push(v.parse::<f64>().map_err(|_| {
                Error::invalid("import_csv", format!("line {}: bad number", lineno + 2))
            })?);
        }
        labels.push(fields[dim].parse::<usize>().map_err(|_| {
            Error::invalid("import_csv", format!("line {}: bad label", lineno + 2))
        })?);
        domain = fields[dim + 1].to_string();
    }
    LabeledDataset::new(
        Tensor::new(vec![labels.len(), dim], data)?,
        labels,
        domain,
        "imported",
    )
}
