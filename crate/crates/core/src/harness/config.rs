use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::noise::NoiseOptions;
use crate::datascope::{
    load_cifar10, load_cifar10_test, synth_blobs, BlobSpec, LabeledDataset, NormScaling,
};
use crate::error::{Error, Result};
use crate::netfun::{BnMode, LayerSpec, Regularizer, TrainConfig};
use crate::norm::Norm;
use crate::robustometry::{DEFAULT_GRID, DEFAULT_SAMPLES};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    NoiseSweep,
    Interpolate,
    LayerHist,
    AlphaCurve,
    DatasetAudit,
    CompositionCheck,
}

pub const KINDS: [&str; 7] = [
    "train",
    "noise-sweep",
    "interpolate",
    "layer-hist",
    "alpha-curve",
    "dataset-audit",
    "composition-check",
];

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        KINDS[self as usize]
    }

    pub fn parse(s: &str) -> Result<Self> {
        KINDS
            .iter()
            .position(|k| *k == s)
            .map(|i| {
                [
                    ExperimentKind::Train,
                    ExperimentKind::NoiseSweep,
                    ExperimentKind::Interpolate,
                    ExperimentKind::LayerHist,
                    ExperimentKind::AlphaCurve,
                    ExperimentKind::DatasetAudit,
                    ExperimentKind::CompositionCheck,
                ][i]
            })
            .ok_or_else(|| Error::config("kind", format!("unknown experiment kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        split: Split,
        #[serde(default)]
        subsample: Option<usize>,
        #[serde(default)]
        subsample_seed: u64,
    },
    Inline {
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Blobs(b) => synth_blobs(b),
            DatasetSpec::Cifar10 {
                dir,
                split,
                subsample,
                subsample_seed,
            } => {
                let full = match split {
                    Split::Train => load_cifar10(dir)?,
                    Split::Test => load_cifar10_test(dir)?,
                };
                match subsample {
                    Some(m) => full.subsample(*m, *subsample_seed),
                    None => Ok(full),
                }
            }
            DatasetSpec::Inline {
                inputs,
                labels,
                classes,
            } => LabeledDataset::new(
                "inline",
                Tensor::from_rows(inputs)?,
                labels.clone(),
                *classes,
            ),
        }
    }

    /// Held-out counterpart: fresh blob draws, the CIFAR test split, or the
    /// same inline points.
    pub fn held_out(&self) -> DatasetSpec {
        match self {
            DatasetSpec::Blobs(b) => DatasetSpec::Blobs(BlobSpec {
                seed: crate::rng::derive_seed(b.seed, &[0x7E57]),
                ..b.clone()
            }),
            DatasetSpec::Cifar10 {
                dir,
                subsample,
                subsample_seed,
                ..
            } => DatasetSpec::Cifar10 {
                dir: dir.clone(),
                split: Split::Test,
                subsample: *subsample,
                subsample_seed: *subsample_seed,
            },
            inline => inline.clone(),
        }
    }

    fn paths(&self) -> Vec<(&'static str, &Path)> {
        match self {
            DatasetSpec::Cifar10 { dir, .. } => vec![("dataset.dir", dir.as_path())],
            _ => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualPreset {
    pub blocks: usize,
    pub width: usize,
}

/// Exactly one of `layers`, `residual` or `checkpoint`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    /// `affine(d, w), relu, blocks x residual-block(w), affine(w, C), softmax`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl NetworkSpec {
    pub fn layer_specs(&self, input: usize, classes: usize) -> Option<Vec<LayerSpec>> {
        if let Some(l) = &self.layers {
            return Some(l.clone());
        }
        self.residual.as_ref().map(|p| {
            let mut specs = vec![
                LayerSpec::Affine {
                    input,
                    output: p.width,
                },
                LayerSpec::Relu,
            ];
            specs.extend((0..p.blocks).map(|_| LayerSpec::ResidualBlock { dim: p.width }));
            specs.push(LayerSpec::Affine {
                input: p.width,
                output: classes,
            });
            specs.push(LayerSpec::Softmax);
            specs
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    Laplacian,
    Orthogonality,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Laplacian => "laplacian",
            Method::Orthogonality => "orthogonality",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub batchnorm_mode: BnMode,
    #[serde(default)]
    pub taps: Option<Vec<usize>>,
    #[serde(default = "d_lap")]
    pub laplacian_weight: f64,
    #[serde(default = "d_orth")]
    pub orthogonality_weight: f64,
}

fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    0.05
}
fn d_lap() -> f64 {
    1e-2
}
fn d_orth() -> f64 {
    0.01
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            batchnorm_mode: BnMode::Train,
            taps: None,
            laplacian_weight: d_lap(),
            orthogonality_weight: d_orth(),
        }
    }
}

impl TrainSettings {
    pub fn config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            regularizer: match method {
                Method::Vanilla => Regularizer::None,
                Method::Laplacian => Regularizer::Laplacian {
                    weight: self.laplacian_weight,
                },
                Method::Orthogonality => Regularizer::Orthogonality {
                    weight: self.orthogonality_weight,
                },
            },
            batchnorm_mode: self.batchnorm_mode,
            taps: self.taps.clone(),
        }
    }
}

/// What an alpha-curve experiment probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CurveFunction {
    #[default]
    Network,
    Sigmoid,
    Identity,
}

/// A single JSON document describing one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    /// Evaluation set for noise sweeps; defaults to the held-out counterpart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub scaling: NormScaling,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_grid")]
    pub grid: usize,
    /// Number of leading dataset examples used as probe centres.
    #[serde(default = "d_points")]
    pub points: usize,

    #[serde(default = "d_snr")]
    pub snr_db: Vec<f64>,
    #[serde(default = "d_runs")]
    pub runs: usize,
    #[serde(default)]
    pub noise: NoiseOptions,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,

    #[serde(default)]
    pub example: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,

    #[serde(default)]
    pub function: CurveFunction,
    #[serde(default)]
    pub radii: Vec<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_targets: Option<Vec<f64>>,
    #[serde(default = "d_tolerance")]
    pub tolerance: f64,

    #[serde(default = "d_alphas")]
    pub alphas: Vec<f64>,
    /// Distance ceilings; empty means multiples of the margin.
    #[serde(default)]
    pub distances: Vec<f64>,
    #[serde(default = "d_budget")]
    pub pair_budget: usize,
    #[serde(default)]
    pub delta: f64,
}

fn d_methods() -> Vec<Method> {
    vec![Method::Vanilla]
}
fn d_samples() -> usize {
    DEFAULT_SAMPLES
}
fn d_grid() -> usize {
    DEFAULT_GRID
}
fn d_points() -> usize {
    10
}
fn d_snr() -> Vec<f64> {
    vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 30.0]
}
fn d_runs() -> usize {
    10
}
fn d_tolerance() -> f64 {
    0.05
}
fn d_alphas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 5.0, 10.0]
}
fn d_budget() -> usize {
    50_000_000
}

const REQUIRED: [&str; 3] = ["kind", "dataset", "seeds"];

impl ExperimentConfig {
    /// Parses and validates; a `method` key is accepted as a one-element `methods`.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::config("<root>", "config must be a JSON object"))?;
        for field in REQUIRED {
            if !obj.contains_key(field) {
                return Err(Error::config(field, "missing"));
            }
        }
        match obj.get("kind") {
            Some(Value::String(k)) => {
                ExperimentKind::parse(k)?;
            }
            _ => return Err(Error::config("kind", "must be a string")),
        }
        if let Some(m) = obj.remove("method") {
            if obj.contains_key("methods") {
                return Err(Error::config("method", "give either `method` or `methods`"));
            }
            obj.insert("methods".into(), Value::Array(vec![m]));
        }
        let cfg: ExperimentConfig = serde_json::from_value(v)
            .map_err(|e| Error::config(field_of(&e.to_string()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    fn needs_network(&self) -> bool {
        match self.kind {
            ExperimentKind::DatasetAudit => false,
            ExperimentKind::AlphaCurve => self.function == CurveFunction::Network,
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must list at least one method"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "must be at least 1"));
        }
        if self.grid == 0 {
            return Err(Error::config("grid", "must be at least 1"));
        }
        if self.points == 0 {
            return Err(Error::config("points", "must be at least 1"));
        }
        let mut paths = self.dataset.paths();
        if let Some(e) = &self.eval_dataset {
            paths.extend(e.paths().into_iter().map(|(_, p)| ("eval_dataset.dir", p)));
        }
        match &self.network {
            Some(n) => {
                let set = [
                    n.layers.is_some(),
                    n.residual.is_some(),
                    n.checkpoint.is_some(),
                ]
                .iter()
                .filter(|&&b| b)
                .count();
                if set != 1 {
                    return Err(Error::config(
                        "network",
                        "give exactly one of `layers`, `residual`, `checkpoint`",
                    ));
                }
                if let Some(c) = &n.checkpoint {
                    paths.push(("network.checkpoint", c.as_path()));
                }
            }
            None if self.needs_network() => {
                return Err(Error::config(
                    "network",
                    format!("required for `{}`", self.kind.name()),
                ));
            }
            None => {}
        }
        for (field, p) in paths {
            if !p.exists() {
                return Err(Error::config(
                    field,
                    format!("path {} does not exist", p.display()),
                ));
            }
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config("radius", "must be positive"));
            }
        }
        match self.kind {
            ExperimentKind::NoiseSweep => {
                if self.snr_db.is_empty() || self.snr_db.iter().any(|s| s.is_nan()) {
                    return Err(Error::config(
                        "snr_db",
                        "must be a nonempty list of numbers",
                    ));
                }
                if self.runs == 0 {
                    return Err(Error::config("runs", "must be at least 1"));
                }
            }
            ExperimentKind::AlphaCurve => {
                if self.radii.is_empty() {
                    return Err(Error::config("radii", "required for `alpha-curve`"));
                }
                if self.radii.iter().any(|r| !(*r > 0.0))
                    || self.radii.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::config(
                        "radii",
                        "must be positive and strictly increasing",
                    ));
                }
            }
            ExperimentKind::CompositionCheck => {
                if let Some(t) = &self.alpha_targets {
                    if t.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
                        return Err(Error::config(
                            "alpha_targets",
                            "every target must lie in (0, 1]",
                        ));
                    }
                }
                if !(self.tolerance >= 0.0) {
                    return Err(Error::config("tolerance", "must be >= 0"));
                }
            }
            ExperimentKind::DatasetAudit => {
                if self.alphas.iter().any(|a| !(*a >= 0.0)) {
                    return Err(Error::config("alphas", "must be >= 0"));
                }
                if self.distances.iter().any(|d| !(*d > 0.0)) {
                    return Err(Error::config("distances", "must be positive"));
                }
                if !(self.delta >= 0.0) {
                    return Err(Error::config("delta", "must be >= 0"));
                }
            }
            _ => {}
        }
        if let Some(l) = &self.lambdas {
            if l.is_empty() {
                return Err(Error::config("lambdas", "must not be empty"));
            }
        }
        let probe = self.train.config(Method::Vanilla, 0);
        probe
            .validate()
            .map_err(|e| Error::config("train", e.to_string()))?;
        for m in &self.methods {
            self.train
                .config(*m, 0)
                .validate()
                .map_err(|e| Error::config("train", e.to_string()))?;
        }
        Ok(())
    }

    /// The canonical echo written next to the outputs; the output directory
    /// is left out so that the same experiment hashes the same anywhere.
    pub fn echo(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(serde_json::to_string_pretty(&c)? + "\n")
    }
}

/// Best-effort field name from a serde message such as "missing field `x`".
fn field_of(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<config>").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "kind": "train",
        "dataset": {"source": "blobs", "classes": 2, "per_class": 5, "dim": 2, "separation": 4.0, "noise_sd": 0.1, "seed": 1},
        "network": {"residual": {"blocks": 1, "width": 4}},
        "method": "laplacian",
        "seeds": [1, 2]
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.methods, vec![Method::Laplacian]);
        assert_eq!(c.samples, 4096);
        assert_eq!(c.train.epochs, 100);
        let echo = c.echo().unwrap();
        assert_eq!(ExperimentConfig::from_json(&echo).unwrap(), c);
    }

    #[test]
    fn missing_seed_is_named() {
        let text = BASE.replace(r#""seeds": [1, 2]"#, r#""runs": 3"#);
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("seeds"), "{err}");
        let text = BASE.replace("[1, 2]", "[]");
        assert!(ExperimentConfig::from_json(&text)
            .unwrap_err()
            .to_string()
            .contains("seeds"));
    }

    #[test]
    fn unknown_kind_and_missing_paths() {
        let err = ExperimentConfig::from_json(&BASE.replace("\"train\"", "\"fly\"")).unwrap_err();
        assert!(err.to_string().contains("unknown experiment kind"), "{err}");
        let text = BASE.replace(
            r#""residual": {"blocks": 1, "width": 4}"#,
            r#""checkpoint": "/nonexistent/net.ckpt""#,
        );
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("network.checkpoint"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BASE.replace(r#""method""#, r#""epochz": 3, "method""#);
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }
}
