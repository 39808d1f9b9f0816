//! Experiment orchestration: JSON configs, noise sweeps, per-layer
//! histograms and reproducible artifact directories with hashed manifests.

mod config;
mod noise;
mod run;

pub use config::{
    CurveFunction, DatasetSpec, ExperimentConfig, ExperimentKind, Method, NetworkSpec,
    ResidualPreset, Split, TrainSettings, KINDS,
};
pub use noise::{
    layer_histogram, noise_sweep, LayerAlpha, NoiseMode, NoiseOptions, NoiseSweepResult,
    FIG5_RADIUS,
};
pub use run::{run_config, run_experiment, RunSummary, COMPOSITION_RADIUS, CONFIG_ECHO, MANIFEST};
