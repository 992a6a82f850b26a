//! Parameter estimation in the mixture-of-experts regression model that
//! prompt tuning induces: data generation, least-squares fitting, Voronoi
//! losses and empirical convergence rates.

pub mod fit;
pub mod model;
pub mod rate;
pub mod voronoi;

pub use fit::{fit_least_squares, fit_multi_start, FitReport, FitStatus, LeastSquares, OptimizerConfig};
pub use model::{
    eval_true_regression, sample_dataset, Dataset, InputDistribution, MixingMeasure, PretrainedExpertSpec,
    RegressionConfig, RegressionModel,
};
pub use rate::{fit_loglog_slope, rate_experiment, LossKind, MeasureSpec, RateConfig, RateOutcome, RateRecord, RateSummary, SlopeFit};
pub use voronoi::{voronoi_assign, voronoi_assign_products, voronoi_loss_d1, voronoi_loss_d2, VoronoiAssignment};
