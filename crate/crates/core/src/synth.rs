//! Synthetic Gaussian-blob datasets and paired vector augmentations.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Radius of the ball class centers are drawn from.
    pub center_spread: f64,
    /// Standard deviation of the isotropic within-class noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 250,
            dim: 16,
            center_spread: 4.0,
            noise_scale: 1.0,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(
                "dataset needs at least 2 classes".into(),
            ));
        }
        if self.dim < 2 {
            return Err(Error::InvalidConfig("dataset dim must be >= 2".into()));
        }
        if self.samples_per_class < 1 {
            return Err(Error::InvalidConfig(
                "samples_per_class must be >= 1".into(),
            ));
        }
        if !(self.center_spread >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("spread and noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Samples (rows) and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Little-endian bytes of samples then labels, for content hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 8 + self.labels.len() * 8);
        for v in self.samples.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Gaussian blobs: class centers uniform in a ball of radius `center_spread`,
/// samples are center plus isotropic noise. Labels are class indices,
/// grouped by class.
pub fn make_dataset<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Dataset {
    let centers: Vec<Array1<f64>> = (0..spec.num_classes)
        .map(|_| {
            let dir = unit_vector(spec.dim, rng);
            let radius = spec.center_spread * rng.random::<f64>().powf(1.0 / spec.dim as f64);
            dir * radius
        })
        .collect();
    let n = spec.num_classes * spec.samples_per_class;
    let mut samples = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let row = class * spec.samples_per_class + s;
            for j in 0..spec.dim {
                let noise: f64 = StandardNormal.sample(rng);
                samples[[row, j]] = center[j] + spec.noise_scale * noise;
            }
            labels.push(class);
        }
    }
    Dataset { samples, labels }
}

/// Loads `sample_id,feature_0,…,feature_{d−1},label` with a header row.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3
        || headers.get(0) != Some("sample_id")
        || headers.get(headers.len() - 1) != Some("label")
    {
        return Err(Error::Csv(
            "expected header `sample_id,feature_0,...,label`".into(),
        ));
    }
    let dim = headers.len() - 2;
    for (j, h) in headers.iter().skip(1).take(dim).enumerate() {
        if h != format!("feature_{j}") {
            return Err(Error::Csv(format!("unexpected column `{h}`")));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        for field in record.iter().skip(1).take(dim) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Csv(format!("row {}: bad number `{field}`", line + 1)))?;
            values.push(v);
        }
        let label = record.get(dim + 1).unwrap_or("");
        labels.push(
            label
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Csv(format!("row {}: bad label `{label}`", line + 1)))?,
        );
    }
    let samples = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| Error::Csv(e.to_string()))?;
    Ok(Dataset { samples, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub noise_sigma: f64,
    /// Maximum rotation angle (radians) in a random 2-plane.
    pub max_rotation: f64,
    pub dropout_prob: f64,
    /// Scale factor drawn uniformly from `[1 − scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            max_rotation: 0.5,
            dropout_prob: 0.1,
            scale_jitter: 0.2,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            max_rotation: 0.0,
            dropout_prob: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidConfig(
                "dropout_prob must lie in [0, 1]".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_rotation >= 0.0) {
            return Err(Error::InvalidConfig(
                "noise_sigma and max_rotation must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::InvalidConfig(
                "scale_jitter must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One draw of rotate → scale → dropout → noise.
pub fn augment<R: Rng + ?Sized>(
    sample: ArrayView1<'_, f64>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Array1<f64> {
    let dim = sample.len();
    let mut x = sample.to_owned();
    if spec.max_rotation > 0.0 && dim >= 2 {
        let u = unit_vector(dim, rng);
        let mut v = unit_vector(dim, rng);
        v = &v - &(&u * u.dot(&v));
        let vn = v.dot(&v).sqrt();
        if vn > 1e-12 {
            v /= vn;
            let angle = rng.random_range(-spec.max_rotation..=spec.max_rotation);
            let (a, b) = (x.dot(&u), x.dot(&v));
            let (c, s) = (angle.cos(), angle.sin());
            let (ra, rb) = (c * a - s * b, s * a + c * b);
            x.scaled_add(ra - a, &u);
            x.scaled_add(rb - b, &v);
        }
    }
    if spec.scale_jitter > 0.0 {
        let f = rng.random_range(1.0 - spec.scale_jitter..=1.0 + spec.scale_jitter);
        x *= f;
    }
    if spec.dropout_prob > 0.0 {
        for v in x.iter_mut() {
            if rng.random::<f64>() < spec.dropout_prob {
                *v = 0.0;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += spec.noise_sigma * e;
        }
    }
    x
}

/// Two independent draws of the same augmentation distribution.
pub fn augment_pair<R: Rng + ?Sized>(
    sample: ArrayView1<'_, f64>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> (Array1<f64>, Array1<f64>) {
    let a = augment(sample, spec, rng);
    let b = augment(sample, spec, rng);
    (a, b)
}

/// Augments each listed sample twice and returns the two views as
/// `dim × batch` matrices (one column per sample).
pub fn augment_batch<R: Rng + ?Sized>(
    data: &Dataset,
    indices: &[usize],
    spec: &AugmentSpec,
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let dim = data.dim();
    let mut v1 = Array2::zeros((dim, indices.len()));
    let mut v2 = Array2::zeros((dim, indices.len()));
    for (col, &i) in indices.iter().enumerate() {
        let (a, b) = augment_pair(data.samples.row(i), spec, rng);
        v1.column_mut(col).assign(&a);
        v2.column_mut(col).assign(&b);
    }
    (v1, v2)
}
