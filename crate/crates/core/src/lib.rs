//! Density-based uncertainty categorization in a classifier's latent space.
//!
//! A kernel density over the training latents flags out-of-distribution
//! inputs. A grid of densities over validation latents, one per
//! `(true, predicted)` class pair, separates boundary cases from points that
//! sit inside the wrong class. The inverse direction retrains on training
//! data filtered by its density under a set of flagged test points.

pub mod categorizer;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod inverse;
pub mod kde;
pub mod synth;

pub use categorizer::{
    build_index, categorize, run_categorization, score, CategorizationRun, CategorizeConfig,
    Category, CategoryReport, ConfusionDensityIndex, ScoreRow, ScoreTable, Scores, ThresholdBasis,
    Thresholds,
};
pub use classifier::{Checkpoint, Classifier, TrainConfig};
pub use data::{
    load_feature_csv, load_latent_csv, save_feature_csv, save_latent_csv, DatasetMeta,
    FeatureDataset, LatentDataset, NormalizationStats, OOD_LABEL,
};
pub use error::{Error, Result};
pub use inverse::{inverse_retrain, FilterConfig, InverseReport};
pub use kde::{KdeModel, Kernel, KernelFamily};
pub use synth::{make_two_smiles, Splits, TwoSmilesConfig};
