//! Datasets (CIFAR-10 binary, synthetic blobs) and dataset-level
//! feasibility quantities: margin, gap, output margin, Lipschitz lower
//! bound and incompatible-pair fractions.

mod bounds;
mod cifar;
mod dataset;
pub mod pairs;

pub use bounds::{
    dataset_lipschitz_lower_bound, gap, gap_condition_check, incompatible_pair_fraction, margin,
    margin_output, pair_stats, write_fraction_csv, write_quantity_csv, FractionReport, FractionRow,
    GapReport, GapVerdict, LipschitzLowerBound, PairStats, PairValue, QuantityRow, Subsample,
};
pub use cifar::{load_cifar10, load_cifar10_test, parse_records, BATCH_BYTES, RECORD_BYTES};
pub use dataset::{one_hot, synth_blobs, BlobSpec, LabeledDataset, NormScaling};
