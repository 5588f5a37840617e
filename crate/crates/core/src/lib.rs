//! Semantic analysis model for rating prediction.
//!
//! Users and items are described by per-feature category distributions
//! learned from a sparse rating matrix; ratings are predicted by matching the
//! two sides' distributions under a Laplace factor and taking the expectation
//! of a soft-max over rating levels.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod semantics;
pub mod training;

pub use baselines::{nmf_objective, predict_mf, train_mf, train_nmf, Biases, EpochReport, MFModel, MfKind};
pub use checkpoint::{AnyModel, Checkpoint, CHECKPOINT_VERSION};
pub use dataset::{parse_ratings, split, stats, DatasetStats, IdMap, Rating, RatingDataset, RatingFormat, Split};
pub use error::{Result, SarError};
pub use eval::{
    evaluate, mae, mean_by_value, param_sweep, rmse, round_rating, sparsity_sweep, sweep_csv_header, sweep_csv_row,
    sweep_to_csv, time_rounds, tradeoff_metric, train_and_evaluate, Metrics, Predictor, SweepParam, SweepRow, Timed,
};
pub use model::{
    category_dist, item_semantic_profile, joint_prob, laplace_factor, predict_rating, preference_scores,
    user_semantic_profile, SarHyperparams, SarModel, SarParams, Side,
};
pub use semantics::{
    extract_profiles, format_significant, jacobi_eigen, pca_project, project_profiles, Pca, SemanticProfile,
    SkipReason, SkipReport,
};
pub use training::{
    adadelta_step, finite_diff_grad, gradients, loss, train, train_with_observer, AdaDeltaState, RoundStats,
    StopReason, TrainConfig, TrainReport, Trainer,
};
