use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// How input-space distances are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormScaling {
    #[default]
    Raw,
    /// L2 distances divided by `sqrt(dimension)`.
    PerSqrtDim,
}

impl NormScaling {
    pub fn name(self) -> &'static str {
        match self {
            NormScaling::Raw => "raw",
            NormScaling::PerSqrtDim => "per-sqrt-dim",
        }
    }
}

/// Flattened inputs with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub scaling: NormScaling,
    /// Inputs are images scaled to `[0, 1]`.
    pub image: bool,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::shape(
                "dataset",
                format!("inputs must be n x d, got {:?}", inputs.shape()),
            ));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} inputs but {} labels", inputs.rows(), labels.len()),
            ));
        }
        if classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some((i, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= classes) {
            return Err(Error::invalid(format!(
                "label {c} of example {i} outside [0, {classes})"
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::invalid("dataset inputs must be finite"));
        }
        Ok(LabeledDataset {
            name: name.into(),
            inputs,
            labels,
            classes,
            scaling: NormScaling::Raw,
            image: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `n x C` matrix whose rows are the one-hot vectors `c^{x_i}`.
    pub fn one_hot(&self) -> Tensor {
        one_hot(&self.labels, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }

    /// Number of classes with at least one example.
    pub fn nonempty_classes(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }

    pub fn with_scaling(mut self, scaling: NormScaling) -> Self {
        self.scaling = scaling;
        self
    }

    /// Factor applied to raw L2 distances under the current scaling.
    pub fn distance_factor(&self) -> f64 {
        match self.scaling {
            NormScaling::Raw => 1.0,
            NormScaling::PerSqrtDim => 1.0 / (self.dim() as f64).sqrt(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if indices.is_empty() {
            return Err(Error::invalid("empty selection"));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "index {i} beyond dataset size {}",
                    self.len()
                )));
            }
            data.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Ok(LabeledDataset {
            name: self.name.clone(),
            inputs: Tensor::matrix(indices.len(), d, data)?,
            labels,
            classes: self.classes,
            scaling: self.scaling,
            image: self.image,
        })
    }

    /// Seeded subsample of `size` examples (sorted indices); returns self
    /// unchanged when `size >= len`.
    pub fn subsample(&self, size: usize, seed: u64) -> Result<LabeledDataset> {
        if size >= self.len() {
            return Ok(self.clone());
        }
        self.select(&subsample_indices(self.len(), size, seed))
    }

    /// Returns a copy with every input multiplied by `c`.
    pub fn scaled(&self, c: f64) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.scale(c),
            ..self.clone()
        }
    }
}

pub(crate) fn subsample_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, &[0x5AB5]);
    let mut idx = index::sample(&mut r, n, size).into_vec();
    idx.sort_unstable();
    idx
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    for (i, &c) in labels.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

/// Parameters of [`synth_blobs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Distance between neighbouring class centres.
    pub separation: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Isotropic Gaussian clusters around centres spaced `separation` apart on
/// the first axis, symmetric about the origin. Examples are interleaved by class.
pub fn synth_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    if spec.classes < 1 || spec.per_class < 1 || spec.dim < 1 {
        return Err(Error::invalid(
            "blobs need classes, points per class and dimension >= 1",
        ));
    }
    if !(spec.separation > 0.0) {
        return Err(Error::invalid("blob separation must be positive"));
    }
    if !(spec.noise_sd >= 0.0) {
        return Err(Error::invalid("blob noise sd must be non-negative"));
    }
    let mut r = rng::stream(spec.seed, &[0xB10B]);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let half = (spec.classes as f64 - 1.0) / 2.0;
    for _ in 0..spec.per_class {
        for c in 0..spec.classes {
            for k in 0..spec.dim {
                let centre = if k == 0 {
                    (c as f64 - half) * spec.separation
                } else {
                    0.0
                };
                let z: f64 = StandardNormal.sample(&mut r);
                data.push(centre + spec.noise_sd * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(
        format!("blobs-c{}-d{}", spec.classes, spec.dim),
        Tensor::matrix(n, spec.dim, data)?,
        labels,
        spec.classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sd: f64, seed: u64) -> BlobSpec {
        BlobSpec {
            classes: 3,
            per_class: 5,
            dim: 4,
            separation: 2.5,
            noise_sd: sd,
            seed,
        }
    }

    #[test]
    fn zero_noise_points_sit_on_centres() {
        let d = synth_blobs(&spec(0.0, 1)).unwrap();
        for i in 0..d.len() {
            let c = d.labels()[i] as f64;
            assert_eq!(d.input(i)[0], (c - 1.0) * 2.5);
            assert!(d.input(i)[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_bits() {
        assert_eq!(
            synth_blobs(&spec(0.3, 4)).unwrap(),
            synth_blobs(&spec(0.3, 4)).unwrap()
        );
        assert_ne!(
            synth_blobs(&spec(0.3, 4)).unwrap(),
            synth_blobs(&spec(0.3, 5)).unwrap()
        );
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(LabeledDataset::new("x", Tensor::zeros(&[2, 2]), vec![0, 3], 2).is_err());
        assert!(LabeledDataset::new("x", Tensor::zeros(&[2, 2]), vec![0], 2).is_err());
    }

    #[test]
    fn subsample_is_seeded_subset() {
        let d = synth_blobs(&spec(0.3, 4)).unwrap();
        let a = d.subsample(6, 9).unwrap();
        assert_eq!(a, d.subsample(6, 9).unwrap());
        assert_eq!(a.len(), 6);
        assert_eq!(d.subsample(100, 9).unwrap(), d);
    }
}
