//! Seeded Monte Carlo estimates of local robustness constants, closed-form
//! reference functions and the per-layer compositional checker.

mod compose;
mod estimator;
mod functions;

pub use compose::{
    check_compositional_bound, default_lambda_grid, interpolation_sweep, CompositionReport,
    InterpolationRow, InterpolationSweep, LayerCheck, HYPOTHESIS_RTOL,
};
pub use estimator::{
    alpha_r_curve, estimate_alpha_lim, estimate_layer_alpha, r_lim, AlphaCurve, RLimit,
    RobustnessEstimate, RobustnessQuery, Sampling, DEFAULT_GRID, DEFAULT_SAMPLES, MAGNITUDE_FLOOR,
};
pub use functions::{
    mediator_classifier, nearest_neighbor_classifier, sigmoid, Constant, Identity, LayerFunction,
    LinearMap, MediatorClassifier, NearestNeighborClassifier, RowFn, Scaled, Sigmoid,
    VectorFunction,
};
