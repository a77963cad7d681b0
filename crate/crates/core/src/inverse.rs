//! Retraining on density-filtered training data.
//!
//! Given a target set of suspicious test points, every training point gets a
//! density `p(x | target)`. Training points whose density reaches the
//! `floor(q * N)`-th smallest value are kept, and a fresh linear head is
//! trained on them with the same configuration and seed as the reference
//! model. Both models are then compared on the target set.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::categorizer::{order_statistic, quantile_rank, Category};
use crate::classifier::{train_linear, Classifier, LinearSoftmaxModel, TrainConfig};
use crate::data::{zscore_apply, zscore_fit, LatentDataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::kde::{KdeModel, Kernel, KernelFamily};

pub const DEFAULT_FILTER_BANDWIDTH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Proportion of training data to discard, in `[0, 1)`.
    pub q: f64,
    pub bandwidth: f64,
    pub kernel: KernelFamily,
    pub target: Category,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            q: 0.0,
            bandwidth: DEFAULT_FILTER_BANDWIDTH,
            kernel: KernelFamily::Gaussian,
            target: Category::BndIdm,
        }
    }
}

impl FilterConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.q) {
            return Err(Error::InvalidConfig(format!(
                "q = {} outside [0, 1)",
                self.q
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    /// Retained training rows, in original order.
    pub dataset: LatentDataset,
    pub kept: Vec<usize>,
    pub tau_test: f64,
    /// `p(x | target)` for every training row.
    pub densities: Vec<f64>,
}

/// Keeps the training rows whose density under the target set is at least
/// the `floor(q * N)`-th smallest such density.
pub fn filter_train(
    train: &LatentDataset,
    target_latents: ArrayView2<'_, f64>,
    cfg: &FilterConfig,
) -> Result<Filtered> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if target_latents.nrows() == 0 {
        return Err(Error::Empty("no target examples to filter against"));
    }
    let kernel = Kernel::new(cfg.kernel, cfg.bandwidth)?;
    let kde = KdeModel::fit(kernel, target_latents.to_owned());
    let densities = kde.eval_batch(train.latents())?;
    let tau_test = order_statistic(&densities, quantile_rank(densities.len(), cfg.q))?;
    let kept: Vec<usize> = (0..train.len())
        .filter(|&i| densities[i] >= tau_test)
        .collect();
    Ok(Filtered {
        dataset: train.select(&kept),
        kept,
        tau_test,
        densities,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseStatus {
    Ok,
    NoTargetExamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseReport {
    pub q: f64,
    pub bandwidth: f64,
    pub target: Category,
    pub status: InverseStatus,
    pub n_target: usize,
    pub n_train_full: usize,
    pub n_train_filtered: usize,
    pub tau_test: Option<f64>,
    pub acc_full_on_target: Option<f64>,
    pub acc_filtered_on_target: Option<f64>,
    pub acc_full_overall: Option<f64>,
    pub acc_filtered_overall: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct InverseOutcome {
    pub report: InverseReport,
    pub full_model: LinearSoftmaxModel,
    pub filtered_model: Option<LinearSoftmaxModel>,
    pub full_pred: Vec<usize>,
    pub filtered_pred: Option<Vec<usize>>,
}

fn labelled_rows(ds: &LatentDataset) -> Result<(Array2<f64>, Vec<usize>)> {
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.y_true()[i] >= 0).collect();
    if keep.len() != ds.len() {
        return Err(Error::InvalidDataset(
            "training set contains OOD-labelled rows".into(),
        ));
    }
    Ok((
        ds.latents().to_owned(),
        ds.y_true().iter().map(|&y| y as usize).collect(),
    ))
}

fn fit_and_predict(
    train: &LatentDataset,
    test: ArrayView2<'_, f64>,
    tcfg: &TrainConfig,
) -> Result<(LinearSoftmaxModel, Vec<usize>)> {
    let (x, y) = labelled_rows(train)?;
    let model = train_linear(x.view(), &y, train.num_classes(), tcfg)?.model;
    let pred = Classifier::Linear(model.clone()).predict(test)?.y_pred;
    Ok((model, pred))
}

/// Trains a linear head on the full training latents and another on the
/// filtered ones, and compares them on the target rows of `test`.
///
/// Latents are z-scored with full-training statistics before filtering and
/// training.
pub fn inverse_retrain(
    train: &LatentDataset,
    test: &LatentDataset,
    target: &[bool],
    cfg: &FilterConfig,
    tcfg: &TrainConfig,
) -> Result<InverseOutcome> {
    cfg.validate()?;
    if target.len() != test.len() {
        return Err(Error::LengthMismatch {
            left: test.len(),
            right: target.len(),
        });
    }
    if test.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            found: test.dim(),
        });
    }
    let stats = zscore_fit(train)?;
    let train_n = zscore_apply(train, &stats)?;
    let test_n = zscore_apply(test, &stats)?;

    let (full_model, full_pred) = fit_and_predict(&train_n, test_n.latents(), tcfg)?;
    let target_rows: Vec<usize> = (0..test.len()).filter(|&i| target[i]).collect();
    let acc_full_overall = accuracy(test.y_true(), &full_pred, None)?;

    let mut report = InverseReport {
        q: cfg.q,
        bandwidth: cfg.bandwidth,
        target: cfg.target,
        status: InverseStatus::NoTargetExamples,
        n_target: target_rows.len(),
        n_train_full: train.len(),
        n_train_filtered: train.len(),
        tau_test: None,
        acc_full_on_target: None,
        acc_filtered_on_target: None,
        acc_full_overall,
        acc_filtered_overall: None,
        seed: tcfg.seed,
    };
    if target_rows.is_empty() {
        return Ok(InverseOutcome {
            report,
            full_model,
            filtered_model: None,
            full_pred,
            filtered_pred: None,
        });
    }

    let target_latents = test_n.latents().select(Axis(0), &target_rows);
    let filtered = filter_train(&train_n, target_latents.view(), cfg)?;
    let (filtered_model, filtered_pred) =
        fit_and_predict(&filtered.dataset, test_n.latents(), tcfg)?;

    report.status = InverseStatus::Ok;
    report.n_train_filtered = filtered.kept.len();
    report.tau_test = Some(filtered.tau_test);
    report.acc_full_on_target = accuracy(test.y_true(), &full_pred, Some(target))?;
    report.acc_filtered_on_target = accuracy(test.y_true(), &filtered_pred, Some(target))?;
    report.acc_filtered_overall = accuracy(test.y_true(), &filtered_pred, None)?;
    Ok(InverseOutcome {
        report,
        full_model,
        filtered_model: Some(filtered_model),
        full_pred,
        filtered_pred: Some(filtered_pred),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(x: Array2<f64>, y: Vec<i64>) -> LatentDataset {
        let n = x.nrows();
        let pred = y.iter().map(|&v| v.max(0) as usize).collect();
        LatentDataset::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            x,
            y,
            pred,
            None,
            2,
        )
        .unwrap()
    }

    fn random(seed: u64, n: usize) -> LatentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-2.0..2.0));
        let y = (0..n).map(|i| (i % 2) as i64).collect();
        dataset(x, y)
    }

    #[test]
    fn q_zero_keeps_everything() {
        let train = random(1, 50);
        let target = array![[0.0, 0.0], [1.0, 1.0]];
        let cfg = FilterConfig {
            bandwidth: 0.5,
            ..FilterConfig::default()
        };
        let f = filter_train(&train, target.view(), &cfg).unwrap();
        assert_eq!(f.kept.len(), 50);
        assert_eq!(f.dataset, train);
    }

    #[test]
    fn high_q_keeps_top_slice_plus_ties() {
        let train = random(2, 100);
        let target = array![[0.5, -0.5]];
        let cfg = FilterConfig {
            q: 0.9,
            bandwidth: 0.5,
            ..FilterConfig::default()
        };
        let f = filter_train(&train, target.view(), &cfg).unwrap();
        let mut sorted = f.densities.clone();
        sorted.sort_by(f64::total_cmp);
        let ties_below = sorted[..89].iter().filter(|&&d| d == f.tau_test).count();
        assert_eq!(f.kept.len(), 11 + ties_below);
    }

    #[test]
    fn empty_target_is_an_error() {
        let train = random(3, 10);
        let err = filter_train(
            &train,
            Array2::zeros((0, 2)).view(),
            &FilterConfig::default(),
        );
        assert!(matches!(err, Err(Error::Empty(_))));
        let bad_q = FilterConfig {
            q: 1.0,
            ..FilterConfig::default()
        };
        assert!(filter_train(&train, array![[0.0, 0.0]].view(), &bad_q).is_err());
    }

    #[test]
    fn nested_in_q() {
        let train = random(4, 80);
        let target = array![[0.0, 0.0], [-1.0, 0.5]];
        let mut prev: Option<Vec<usize>> = None;
        for q in [0.0, 0.2, 0.5, 0.8, 0.95] {
            let cfg = FilterConfig {
                q,
                bandwidth: 0.7,
                ..FilterConfig::default()
            };
            let kept = filter_train(&train, target.view(), &cfg).unwrap().kept;
            if let Some(p) = &prev {
                assert!(kept.iter().all(|i| p.contains(i)));
            }
            prev = Some(kept);
        }
    }

    #[test]
    fn q_zero_retrain_is_identical() {
        let train = random(5, 60);
        let test = random(6, 30);
        let target: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let tcfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let out = inverse_retrain(&train, &test, &target, &FilterConfig::default(), &tcfg).unwrap();
        assert_eq!(out.filtered_model.as_ref(), Some(&out.full_model));
        assert_eq!(
            out.report.acc_full_on_target,
            out.report.acc_filtered_on_target
        );
        assert_eq!(out.report.n_train_filtered, 60);
    }

    #[test]
    fn empty_target_reports_status() {
        let train = random(7, 20);
        let test = random(8, 10);
        let out = inverse_retrain(
            &train,
            &test,
            &[false; 10],
            &FilterConfig::default(),
            &TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.report.status, InverseStatus::NoTargetExamples);
        assert!(out.report.acc_full_on_target.is_none());
        assert!(out.report.acc_full_overall.is_some());
    }
}
