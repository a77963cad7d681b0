//! Density-based categorization of uncertain predictions.
//!
//! Validation examples are split into `C x C` corpora by (true class,
//! predicted class), with one KDE per corpus. For a test point with predicted
//! class `c`:
//!
//! * `t_ood = 1 / p(x | train)`
//! * `t_bnd = sum over k != c of P[k][k](x)` (correctly classified neighbours
//!   of other classes)
//! * `t_idm = sum over k != c of P[k][c](x)` (validation points of other
//!   classes that were misclassified as `c`)
//!
//! A point is OOD when `t_ood >= tau_ood`, where `tau_ood` is the reciprocal
//! of the smallest training density. Remaining points are Bnd, IDM or B&I by
//! strict comparison against quantile thresholds, and Other otherwise.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{entropy_uncertainty, Classifier};
use crate::data::{zscore_apply, zscore_fit, LatentDataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::kde::{KdeModel, Kernel};

/// Stand-in for an infinite OOD score (zero training density).
pub const OOD_SENTINEL: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "OOD")]
    Ood,
    Bnd,
    #[serde(rename = "IDM")]
    Idm,
    #[serde(rename = "B&I")]
    BndIdm,
    Other,
    /// Not flagged by the uncertainty estimator, so never categorized.
    Trusted,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Ood,
        Category::Bnd,
        Category::Idm,
        Category::BndIdm,
        Category::Other,
        Category::Trusted,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Ood => "OOD",
            Category::Bnd => "Bnd",
            Category::Idm => "IDM",
            Category::BndIdm => "B&I",
            Category::Other => "Other",
            Category::Trusted => "Trusted",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ood" => Ok(Category::Ood),
            "bnd" => Ok(Category::Bnd),
            "idm" => Ok(Category::Idm),
            "b&i" | "bi" | "bnd&idm" => Ok(Category::BndIdm),
            "other" => Ok(Category::Other),
            "trusted" => Ok(Category::Trusted),
            _ => Err(Error::InvalidConfig(format!("unknown category `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IndexOptions {
    /// Drop each training point's own kernel term when computing the minimum
    /// training density behind `tau_ood`.
    pub leave_one_out: bool,
}

/// Training density model and the validation confusion density grid.
#[derive(Debug, Clone)]
pub struct ConfusionDensityIndex {
    num_classes: usize,
    dim: usize,
    kernel: Kernel,
    /// Row-major by (true class, predicted class).
    grid: Vec<KdeModel>,
    train: KdeModel,
    min_train_density: f64,
    tau_ood: f64,
}

fn reciprocal(p: f64) -> f64 {
    let t = 1.0 / p;
    if p > 0.0 && t.is_finite() {
        t
    } else {
        OOD_SENTINEL
    }
}

/// Builds the index from training latents and validation predictions.
pub fn build_index(
    train: &LatentDataset,
    val: &LatentDataset,
    kernel: Kernel,
    opts: IndexOptions,
) -> Result<ConfusionDensityIndex> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            found: val.dim(),
        });
    }
    if val.num_classes() != train.num_classes() {
        return Err(Error::InvalidDataset(format!(
            "class count differs: train {} vs val {}",
            train.num_classes(),
            val.num_classes()
        )));
    }
    let c = train.num_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c * c];
    for i in 0..val.len() {
        let t = val.true_class(i).ok_or_else(|| {
            Error::InvalidDataset(format!("validation row {i} carries the OOD label"))
        })?;
        members[t * c + val.y_pred()[i]].push(i);
    }
    let grid = members
        .iter()
        .map(|rows| KdeModel::fit(kernel, val.latents().select(ndarray::Axis(0), rows)))
        .collect();

    let train_kde = KdeModel::fit(kernel, train.latents().to_owned());
    let densities: Vec<f64> = if opts.leave_one_out {
        (0..train.len())
            .into_par_iter()
            .map(|i| {
                train_kde
                    .eval_excluding(train.latent(i), i)
                    .expect("same dim")
            })
            .collect()
    } else {
        train_kde.eval_batch(train.latents())?
    };
    let min_train_density = densities.iter().copied().fold(f64::INFINITY, f64::min);

    Ok(ConfusionDensityIndex {
        num_classes: c,
        dim: train.dim(),
        kernel,
        grid,
        train: train_kde,
        min_train_density,
        tau_ood: reciprocal(min_train_density),
    })
}

impl ConfusionDensityIndex {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn tau_ood(&self) -> f64 {
        self.tau_ood
    }

    pub fn min_train_density(&self) -> f64 {
        self.min_train_density
    }

    pub fn train_kde(&self) -> &KdeModel {
        &self.train
    }

    pub fn corpus(&self, true_class: usize, pred_class: usize) -> &KdeModel {
        &self.grid[true_class * self.num_classes + pred_class]
    }

    /// `sizes[t][p]` = number of validation rows with true `t`, predicted `p`.
    pub fn corpus_sizes(&self) -> Array2<usize> {
        Array2::from_shape_fn((self.num_classes, self.num_classes), |(t, p)| {
            self.corpus(t, p).len()
        })
    }

    /// Full `C x C` matrix of corpus densities at `x`.
    pub fn confusion_density(&self, x: ndarray::ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.num_classes, self.num_classes));
        for t in 0..self.num_classes {
            for p in 0..self.num_classes {
                out[[t, p]] = self.corpus(t, p).eval(x)?;
            }
        }
        Ok(out)
    }

    fn score_one(&self, x: ndarray::ArrayView1<'_, f64>, pred: usize) -> ScoreRow {
        let p_train = self.train.eval(x).expect("dimension checked");
        let mut t_bnd = 0.0;
        let mut t_idm = 0.0;
        for k in (0..self.num_classes).filter(|&k| k != pred) {
            t_bnd += self.corpus(k, k).eval(x).expect("dimension checked");
            t_idm += self.corpus(k, pred).eval(x).expect("dimension checked");
        }
        ScoreRow {
            t_ood: reciprocal(p_train),
            t_bnd,
            t_idm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub t_ood: f64,
    pub t_bnd: f64,
    pub t_idm: f64,
}

/// Raw per-example scores of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub rows: Vec<ScoreRow>,
    pub tau_ood: f64,
}

impl Scores {
    pub fn t_ood(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_ood).collect()
    }

    pub fn t_bnd(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_bnd).collect()
    }

    pub fn t_idm(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_idm).collect()
    }
}

/// OOD, boundary and IDM scores for every row of `data`.
pub fn score(ix: &ConfusionDensityIndex, data: &LatentDataset) -> Result<Scores> {
    if data.dim() != ix.dim {
        return Err(Error::DimensionMismatch {
            expected: ix.dim,
            found: data.dim(),
        });
    }
    if data.num_classes() != ix.num_classes {
        return Err(Error::InvalidDataset(format!(
            "class count differs: index {} vs data {}",
            ix.num_classes,
            data.num_classes()
        )));
    }
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| ix.score_one(data.latent(i), data.y_pred()[i]))
        .collect();
    Ok(Scores {
        rows,
        tau_ood: ix.tau_ood,
    })
}

/// The `rank`-th smallest score, 1-indexed.
pub fn order_statistic(scores: &[f64], rank: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores to threshold"));
    }
    if !(1..=scores.len()).contains(&rank) {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} outside [1, {}]",
            scores.len()
        )));
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*kth)
}

/// `floor(n * q)` clamped to `[1, n]`.
pub fn quantile_rank(n: usize, q: f64) -> usize {
    ((n as f64 * q).floor() as usize).clamp(1, n.max(1))
}

/// The `floor(n * q)`-th smallest score (1-indexed, clamped to `[1, n]`).
pub fn quantile_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidConfig(format!("quantile {q} outside (0, 1]")));
    }
    order_statistic(scores, quantile_rank(scores.len(), q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_ood: f64,
    pub tau_bnd: f64,
    pub tau_idm: f64,
    pub q_bnd: f64,
    pub q_idm: f64,
}

impl Thresholds {
    /// Quantile thresholds over the given score samples.
    pub fn from_quantiles(basis: &Scores, q_bnd: f64, q_idm: f64) -> Result<Self> {
        Ok(Thresholds {
            tau_ood: basis.tau_ood,
            tau_bnd: quantile_threshold(&basis.t_bnd(), q_bnd)?,
            tau_idm: quantile_threshold(&basis.t_idm(), q_idm)?,
            q_bnd,
            q_idm,
        })
    }
}

/// Scores together with the thresholds that will be applied to them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub thresholds: Thresholds,
}

/// Category of a single score row.
pub fn assign(row: &ScoreRow, th: &Thresholds) -> Category {
    if row.t_ood >= th.tau_ood {
        return Category::Ood;
    }
    match (row.t_bnd > th.tau_bnd, row.t_idm > th.tau_idm) {
        (true, true) => Category::BndIdm,
        (true, false) => Category::Bnd,
        (false, true) => Category::Idm,
        (false, false) => Category::Other,
    }
}

/// Categorizes every row. With a mask, only flagged rows are categorized and
/// the rest are reported as [`Category::Trusted`].
pub fn categorize(table: &ScoreTable, flagged: Option<&[bool]>) -> Result<Vec<Category>> {
    if let Some(mask) = flagged {
        if mask.len() != table.rows.len() {
            return Err(Error::LengthMismatch {
                left: table.rows.len(),
                right: mask.len(),
            });
        }
    }
    Ok(table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| match flagged {
            Some(mask) if !mask[i] => Category::Trusted,
            _ => assign(row, &table.thresholds),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdBasis {
    /// Quantiles of the test scores.
    #[default]
    Test,
    /// Quantiles of the validation scores.
    Val,
}

impl FromStr for ThresholdBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(ThresholdBasis::Test),
            "val" => Ok(ThresholdBasis::Val),
            _ => Err(Error::InvalidConfig(format!(
                "unknown threshold basis `{s}`"
            ))),
        }
    }
}

impl fmt::Display for ThresholdBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdBasis::Test => "test",
            ThresholdBasis::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategorizeConfig {
    pub kernel: Kernel,
    /// Defaults to the validation accuracy.
    pub q_bnd: Option<f64>,
    pub q_idm: Option<f64>,
    pub basis: ThresholdBasis,
    pub leave_one_out: bool,
    /// Only rows with `u >= u_threshold` are categorized.
    pub u_threshold: Option<f64>,
}

impl Default for CategorizeConfig {
    fn default() -> Self {
        CategorizeConfig {
            kernel: Kernel::gaussian(1.0).expect("positive bandwidth"),
            q_bnd: None,
            q_idm: None,
            basis: ThresholdBasis::Test,
            leave_one_out: false,
            u_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintySource {
    /// The `u` column of the test file.
    Column,
    /// Normalized predictive entropy recomputed from the model head.
    Entropy,
    /// No uncertainty was used; every row was categorized.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub y_true: i64,
    pub y_pred: usize,
    pub t_ood: f64,
    pub t_bnd: f64,
    pub t_idm: f64,
    pub category: Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    #[serde(rename = "OOD")]
    pub ood: usize,
    #[serde(rename = "Bnd")]
    pub bnd: usize,
    #[serde(rename = "IDM")]
    pub idm: usize,
    #[serde(rename = "B&I")]
    pub bnd_idm: usize,
    #[serde(rename = "Other")]
    pub other: usize,
    #[serde(rename = "Trusted")]
    pub trusted: usize,
}

impl CategoryCounts {
    pub fn tally(categories: &[Category]) -> Self {
        let mut c = CategoryCounts::default();
        for cat in categories {
            *c.get_mut(*cat) += 1;
        }
        c
    }

    pub fn get(&self, cat: Category) -> usize {
        match cat {
            Category::Ood => self.ood,
            Category::Bnd => self.bnd,
            Category::Idm => self.idm,
            Category::BndIdm => self.bnd_idm,
            Category::Other => self.other,
            Category::Trusted => self.trusted,
        }
    }

    fn get_mut(&mut self, cat: Category) -> &mut usize {
        match cat {
            Category::Ood => &mut self.ood,
            Category::Bnd => &mut self.bnd,
            Category::Idm => &mut self.idm,
            Category::BndIdm => &mut self.bnd_idm,
            Category::Other => &mut self.other,
            Category::Trusted => &mut self.trusted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub counts: CategoryCounts,
    pub thresholds: Thresholds,
    pub q_bnd: f64,
    pub q_idm: f64,
    pub threshold_basis: ThresholdBasis,
    pub kernel: String,
    pub bandwidth: f64,
    pub leave_one_out: bool,
    pub validation_accuracy: Option<f64>,
    pub corpus_sizes: Vec<Vec<usize>>,
    pub uncertainty_source: UncertaintySource,
    pub u_threshold: Option<f64>,
    /// Seed of the data / model that produced the latents, when known.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub examples: Vec<ExampleRecord>,
    pub summary: ReportSummary,
}

impl CategoryReport {
    pub fn categories(&self) -> Vec<Category> {
        self.examples.iter().map(|e| e.category).collect()
    }

    pub fn mask(&self, cat: Category) -> Vec<bool> {
        self.examples.iter().map(|e| e.category == cat).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Everything produced by one categorization run.
#[derive(Debug, Clone)]
pub struct CategorizationRun {
    pub stats: NormalizationStats,
    pub index: ConfusionDensityIndex,
    pub table: ScoreTable,
    pub report: CategoryReport,
}

fn check_consistent(train: &LatentDataset, other: &LatentDataset, name: &str) -> Result<()> {
    if other.dim() != train.dim() {
        return Err(Error::InvalidDataset(format!(
            "{name} latent dimension {} differs from train {}",
            other.dim(),
            train.dim()
        )));
    }
    if other.num_classes() != train.num_classes() {
        return Err(Error::InvalidDataset(format!(
            "{name} class count {} differs from train {}",
            other.num_classes(),
            train.num_classes()
        )));
    }
    Ok(())
}

/// Normalizes latents with training statistics, builds the index, scores the
/// test set and assigns categories.
///
/// `model` is only consulted when `u_threshold` is set and the test set has no
/// uncertainty column; the entropy of its head is then used instead.
pub fn run_categorization(
    train: &LatentDataset,
    val: &LatentDataset,
    test: &LatentDataset,
    cfg: &CategorizeConfig,
    model: Option<&Classifier>,
) -> Result<CategorizationRun> {
    check_consistent(train, val, "validation")?;
    check_consistent(train, test, "test")?;
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }

    let (source, flagged) = match cfg.u_threshold {
        None => (UncertaintySource::None, None),
        Some(th) => {
            let (source, u) =
                match (test.uncertainty(), model) {
                    (Some(u), _) => (UncertaintySource::Column, u.to_vec()),
                    (None, Some(m)) => (
                        UncertaintySource::Entropy,
                        entropy_uncertainty(m.probs_from_latents(test.latents())?.view())?,
                    ),
                    (None, None) => return Err(Error::InvalidConfig(
                        "uncertainty threshold given but test set has no `u` column and no model"
                            .into(),
                    )),
                };
            (
                source,
                Some(u.iter().map(|&v| v >= th).collect::<Vec<bool>>()),
            )
        }
    };

    let stats = zscore_fit(train)?;
    let train_n = zscore_apply(train, &stats)?;
    let val_n = zscore_apply(val, &stats)?;
    let test_n = zscore_apply(test, &stats)?;

    let index = build_index(
        &train_n,
        &val_n,
        cfg.kernel,
        IndexOptions {
            leave_one_out: cfg.leave_one_out,
        },
    )?;
    let test_scores = score(&index, &test_n)?;
    let val_acc = val.accuracy();
    let default_q = val_acc.filter(|&a| a > 0.0).unwrap_or(1.0);
    let q_bnd = cfg.q_bnd.unwrap_or(default_q);
    let q_idm = cfg.q_idm.unwrap_or(default_q);
    let thresholds = match cfg.basis {
        ThresholdBasis::Test => Thresholds::from_quantiles(&test_scores, q_bnd, q_idm)?,
        ThresholdBasis::Val => Thresholds::from_quantiles(&score(&index, &val_n)?, q_bnd, q_idm)?,
    };
    let table = ScoreTable {
        rows: test_scores.rows,
        thresholds,
    };
    let categories = categorize(&table, flagged.as_deref())?;

    let examples = (0..test.len())
        .map(|i| ExampleRecord {
            id: test.ids()[i].clone(),
            y_true: test.y_true()[i],
            y_pred: test.y_pred()[i],
            t_ood: table.rows[i].t_ood,
            t_bnd: table.rows[i].t_bnd,
            t_idm: table.rows[i].t_idm,
            category: categories[i],
        })
        .collect();
    let summary = ReportSummary {
        counts: CategoryCounts::tally(&categories),
        thresholds,
        q_bnd,
        q_idm,
        threshold_basis: cfg.basis,
        kernel: cfg.kernel.family.to_string(),
        bandwidth: cfg.kernel.bandwidth,
        leave_one_out: cfg.leave_one_out,
        validation_accuracy: val_acc,
        corpus_sizes: index
            .corpus_sizes()
            .outer_iter()
            .map(|r| r.to_vec())
            .collect(),
        uncertainty_source: source,
        u_threshold: cfg.u_threshold,
        seed: None,
    };
    Ok(CategorizationRun {
        stats,
        index,
        table,
        report: CategoryReport { examples, summary },
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Ok(None);
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

/// Pairwise Spearman correlations of each score type across kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRobustness {
    pub kernels: Vec<Kernel>,
    pub t_ood: Vec<Vec<Option<f64>>>,
    pub t_bnd: Vec<Vec<Option<f64>>>,
    pub t_idm: Vec<Vec<Option<f64>>>,
}

pub fn kernel_robustness(
    train: &LatentDataset,
    val: &LatentDataset,
    test: &LatentDataset,
    kernels: &[Kernel],
) -> Result<KernelRobustness> {
    if kernels.len() < 2 {
        return Err(Error::InvalidConfig("need at least two kernels".into()));
    }
    check_consistent(train, val, "validation")?;
    check_consistent(train, test, "test")?;
    let stats = zscore_fit(train)?;
    let train_n = zscore_apply(train, &stats)?;
    let val_n = zscore_apply(val, &stats)?;
    let test_n = zscore_apply(test, &stats)?;
    let all: Vec<Scores> = kernels
        .iter()
        .map(|&k| {
            let ix = build_index(&train_n, &val_n, k, IndexOptions::default())?;
            score(&ix, &test_n)
        })
        .collect::<Result<_>>()?;
    let matrix = |get: fn(&Scores) -> Vec<f64>| -> Result<Vec<Vec<Option<f64>>>> {
        let vs: Vec<Vec<f64>> = all.iter().map(get).collect();
        vs.iter()
            .map(|a| vs.iter().map(|b| spearman(a, b)).collect())
            .collect()
    };
    Ok(KernelRobustness {
        kernels: kernels.to_vec(),
        t_ood: matrix(Scores::t_ood)?,
        t_bnd: matrix(Scores::t_bnd)?,
        t_idm: matrix(Scores::t_idm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::KernelFamily;
    use ndarray::array;
    use proptest::prelude::*;

    fn latent(rows: Array2<f64>, y_true: Vec<i64>, y_pred: Vec<usize>, c: usize) -> LatentDataset {
        let n = rows.nrows();
        LatentDataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            rows,
            y_true,
            y_pred,
            None,
            c,
        )
        .unwrap()
    }

    fn th(tau_ood: f64, tau_bnd: f64, tau_idm: f64) -> Thresholds {
        Thresholds {
            tau_ood,
            tau_bnd,
            tau_idm,
            q_bnd: 0.5,
            q_idm: 0.5,
        }
    }

    #[test]
    fn diagonal_only_when_all_correct() {
        let train = latent(array![[0.0], [1.0]], vec![0, 1], vec![0, 1], 2);
        let val = latent(
            array![[0.0], [0.1], [1.0], [1.1]],
            vec![0, 0, 1, 1],
            vec![0, 0, 1, 1],
            2,
        );
        let ix = build_index(
            &train,
            &val,
            Kernel::gaussian(1.0).unwrap(),
            IndexOptions::default(),
        )
        .unwrap();
        assert_eq!(ix.corpus_sizes(), array![[2, 0], [0, 2]]);
        assert!(ix.corpus(0, 1).is_empty());
        let s = score(&ix, &val).unwrap();
        assert!(s.rows.iter().all(|r| r.t_idm == 0.0));
    }

    #[test]
    fn misclassified_row_lands_in_its_corpus() {
        let train = latent(array![[0.0], [1.0]], vec![0, 1], vec![0, 1], 2);
        let val = latent(array![[0.0], [5.0]], vec![0, 0], vec![0, 1], 2);
        let ix = build_index(
            &train,
            &val,
            Kernel::gaussian(1.0).unwrap(),
            IndexOptions::default(),
        )
        .unwrap();
        assert_eq!(ix.corpus_sizes(), array![[1, 1], [0, 0]]);
        assert_eq!(ix.corpus(0, 1).refs(), array![[5.0]].view());
    }

    #[test]
    fn two_class_scores_pick_the_other_class() {
        let k = Kernel::gaussian(0.8).unwrap();
        let train = latent(array![[0.0], [1.0], [2.0]], vec![0, 1, 1], vec![0, 1, 1], 2);
        let val = latent(
            array![[0.0], [0.3], [1.0], [1.5], [2.0]],
            vec![0, 1, 1, 0, 1],
            vec![0, 0, 1, 1, 1],
            2,
        );
        let ix = build_index(&train, &val, k, IndexOptions::default()).unwrap();
        let test = latent(array![[0.7]], vec![0], vec![0], 2);
        let s = score(&ix, &test).unwrap();
        let x = array![0.7];
        assert_eq!(s.rows[0].t_bnd, ix.corpus(1, 1).eval(x.view()).unwrap());
        assert_eq!(s.rows[0].t_idm, ix.corpus(1, 0).eval(x.view()).unwrap());
        assert_eq!(
            s.rows[0].t_ood,
            1.0 / ix.train_kde().eval(x.view()).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = Kernel::gaussian(1.0).unwrap();
        let empty =
            LatentDataset::new(vec![], Array2::zeros((0, 1)), vec![], vec![], None, 2).unwrap();
        let one = latent(array![[0.0]], vec![0], vec![0], 2);
        assert!(matches!(
            build_index(&empty, &one, k, IndexOptions::default()),
            Err(Error::Empty(_))
        ));
        let wide = latent(array![[0.0, 1.0]], vec![0], vec![0], 2);
        assert!(build_index(&one, &wide, k, IndexOptions::default()).is_err());
        let ix = build_index(&one, &one, k, IndexOptions::default()).unwrap();
        assert!(score(&ix, &wide).is_err());
    }

    #[test]
    fn tophat_far_point_gets_sentinel_and_ood() {
        let k = Kernel::new(KernelFamily::Tophat, 0.5).unwrap();
        let train = latent(array![[0.0], [0.1]], vec![0, 1], vec![0, 1], 2);
        let ix = build_index(&train, &train, k, IndexOptions::default()).unwrap();
        let s = score(&ix, &latent(array![[10.0]], vec![0], vec![0], 2)).unwrap();
        assert_eq!(s.rows[0].t_ood, OOD_SENTINEL);
        assert_eq!(
            assign(&s.rows[0], &th(ix.tau_ood(), 0.0, 0.0)),
            Category::Ood
        );
    }

    #[test]
    fn leave_one_out_raises_tau() {
        let k = Kernel::gaussian(0.5).unwrap();
        let train = latent(array![[0.0], [0.2], [3.0]], vec![0, 0, 1], vec![0, 0, 1], 2);
        let with_self = build_index(&train, &train, k, IndexOptions::default()).unwrap();
        let loo = build_index(
            &train,
            &train,
            k,
            IndexOptions {
                leave_one_out: true,
            },
        )
        .unwrap();
        assert!(loo.tau_ood() > with_self.tau_ood());
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(
            quantile_threshold(&[5.0, 3.0, 1.0, 4.0, 2.0], 0.8).unwrap(),
            4.0
        );
        assert_eq!(
            quantile_threshold(&[5.0, 3.0, 1.0, 4.0, 2.0], 0.1).unwrap(),
            1.0
        );
        assert_eq!(quantile_threshold(&[5.0, 3.0, 1.0], 1.0).unwrap(), 5.0);
        assert!(quantile_threshold(&[], 0.5).is_err());
        assert!(quantile_threshold(&[1.0], 0.0).is_err());
    }

    #[test]
    fn assignment_rules() {
        let t = th(10.0, 1.0, 1.0);
        let row = |o, b, i| ScoreRow {
            t_ood: o,
            t_bnd: b,
            t_idm: i,
        };
        assert_eq!(assign(&row(10.0, 5.0, 5.0), &t), Category::Ood);
        assert_eq!(assign(&row(1.0, 2.0, 2.0), &t), Category::BndIdm);
        assert_eq!(assign(&row(1.0, 2.0, 1.0), &t), Category::Bnd);
        assert_eq!(assign(&row(1.0, 1.0, 2.0), &t), Category::Idm);
        assert_eq!(assign(&row(1.0, 1.0, 1.0), &t), Category::Other);
    }

    #[test]
    fn mask_marks_trusted() {
        let table = ScoreTable {
            rows: vec![
                ScoreRow {
                    t_ood: 1.0,
                    t_bnd: 2.0,
                    t_idm: 0.0
                };
                3
            ],
            thresholds: th(10.0, 1.0, 1.0),
        };
        let cats = categorize(&table, Some(&[true, false, true])).unwrap();
        assert_eq!(cats, vec![Category::Bnd, Category::Trusted, Category::Bnd]);
        assert!(categorize(&table, Some(&[true])).is_err());
    }

    #[test]
    fn spearman_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a).unwrap(), Some(1.0));
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman(&a, &[7.0; 4]).unwrap(), None);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&a, &[1.0]).is_err());
    }

    #[test]
    fn robustness_identity() {
        let train = latent(
            array![[0.0], [1.0], [2.5], [4.0]],
            vec![0, 0, 1, 1],
            vec![0, 0, 1, 1],
            2,
        );
        let test = latent(array![[0.5], [3.0], [9.0]], vec![0, 1, 1], vec![0, 1, 1], 2);
        let k = Kernel::gaussian(1.0).unwrap();
        let r = kernel_robustness(&train, &train, &test, &[k, k]).unwrap();
        assert_eq!(r.t_ood[0][1], Some(1.0));
        assert!(kernel_robustness(&train, &train, &test, &[k]).is_err());
    }

    #[test]
    fn densest_training_duplicate_is_not_ood() {
        let k = Kernel::gaussian(1.0).unwrap();
        let train = latent(
            array![[0.0], [0.1], [0.2], [3.0], [5.0]],
            vec![0, 0, 0, 1, 1],
            vec![0, 0, 0, 1, 1],
            2,
        );
        let ix = build_index(&train, &train, k, IndexOptions::default()).unwrap();
        let dens = ix.train_kde().eval_batch(train.latents()).unwrap();
        let densest = (0..dens.len())
            .max_by(|&a, &b| dens[a].total_cmp(&dens[b]))
            .unwrap();
        let s = score(&ix, &train.select(&[densest])).unwrap();
        assert!(s.rows[0].t_ood < ix.tau_ood());
    }

    proptest! {
        #[test]
        fn flagged_set_shrinks_with_q(
            scores in proptest::collection::vec(0.0f64..10.0, 1..60),
            q1 in 0.01f64..1.0,
            q2 in 0.01f64..1.0,
        ) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let t_lo = quantile_threshold(&scores, lo).unwrap();
            let t_hi = quantile_threshold(&scores, hi).unwrap();
            for &s in &scores {
                if s > t_hi {
                    prop_assert!(s > t_lo);
                }
            }
        }
    }
}
