//! Built-in classifiers of the form `softmax(l(g(x)))`: multinomial logistic
//! regression (`g` is the identity) and a one-hidden-layer ReLU network whose
//! hidden activations form the latent space. Both are trained by plain
//! gradient descent on the mean cross-entropy.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, LatentDataset, NormalizationStats};
use crate::error::{Error, Result};

const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 500,
            batch_size: None,
            seed: 0,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Softmax of `z / temperature`, computed with max subtraction.
pub fn softmax(z: ArrayView1<'_, f64>, temperature: f64) -> Array1<f64> {
    let scaled = z.mapv(|v| v / temperature);
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = scaled.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn softmax_rows(z: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let p = softmax(row.view(), temperature);
        row.assign(&p);
    }
    out
}

/// Mean negative log-likelihood of `labels` under `softmax(z / temperature)`.
fn cross_entropy(z: &Array2<f64>, labels: &[usize], temperature: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in z.rows().into_iter().zip(labels) {
        let scaled = row.mapv(|v| v / temperature);
        let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + scaled.mapv(|v| (v - max).exp()).sum().ln();
        total += lse - scaled[y];
    }
    total / labels.len() as f64
}

/// d(loss)/d(logits): `(p - onehot) / (temperature * n)`.
fn logit_grad(z: &Array2<f64>, labels: &[usize], temperature: f64) -> Array2<f64> {
    let mut g = softmax_rows(z, temperature);
    for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    g / (temperature * labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-INIT_RANGE..=INIT_RANGE))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-INIT_RANGE..=INIT_RANGE))
}

fn check_training_data(x: ArrayView2<'_, f64>, labels: &[usize], num_classes: usize) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: labels.len(),
        });
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if x.nrows() < num_classes {
        return Err(Error::InvalidConfig(format!(
            "need at least {num_classes} training rows, got {}",
            x.nrows()
        )));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::InvalidConfig(format!(
            "label {c} outside [0, {num_classes})"
        )));
    }
    Ok(())
}

/// Multinomial logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    /// `C x d`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Softmax temperature; the inverse temperature is `1 / temperature`.
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearSoftmaxModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LinearSoftmaxModel {
            weights: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
            temperature: 1.0,
        }
    }

    pub fn init(num_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearSoftmaxModel {
            weights: uniform_matrix(rng, num_classes, dim),
            bias: uniform_vector(rng, num_classes),
            temperature: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    pub fn probs(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        softmax_rows(&self.logits(x), self.temperature)
    }

    pub fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize], l2: f64) -> f64 {
        cross_entropy(&self.logits(x), labels, self.temperature)
            + 0.5 * l2 * self.weights.mapv(|w| w * w).sum()
    }

    pub fn loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        l2: f64,
    ) -> (f64, LinearGrad) {
        let z = self.logits(x);
        let loss = cross_entropy(&z, labels, self.temperature)
            + 0.5 * l2 * self.weights.mapv(|w| w * w).sum();
        let g = logit_grad(&z, labels, self.temperature);
        let grad = LinearGrad {
            weights: g.t().dot(&x) + &(l2 * &self.weights),
            bias: g.sum_axis(Axis(0)),
        };
        (loss, grad)
    }

    fn step(&mut self, grad: &LinearGrad, lr: f64) {
        self.weights.scaled_add(-lr, &grad.weights);
        self.bias.scaled_add(-lr, &grad.bias);
    }
}

/// One hidden ReLU layer; the hidden activations are the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// `d_H x d_X`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `C x d_H`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpModel {
    pub fn init(
        num_classes: usize,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MlpModel {
            w1: uniform_matrix(rng, hidden_dim, input_dim),
            b1: uniform_vector(rng, hidden_dim),
            w2: uniform_matrix(rng, num_classes, hidden_dim),
            b2: uniform_vector(rng, num_classes),
            temperature: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w1.nrows()
    }

    fn pre_activation(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w1.t()) + &self.b1
    }

    pub fn hidden(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.pre_activation(x).mapv(|v| v.max(0.0))
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.hidden(x).dot(&self.w2.t()) + &self.b2
    }

    fn penalty(&self, l2: f64) -> f64 {
        0.5 * l2 * (self.w1.mapv(|w| w * w).sum() + self.w2.mapv(|w| w * w).sum())
    }

    pub fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize], l2: f64) -> f64 {
        cross_entropy(&self.logits(x), labels, self.temperature) + self.penalty(l2)
    }

    pub fn loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        l2: f64,
    ) -> (f64, MlpGrad) {
        let a = self.pre_activation(x);
        let h = a.mapv(|v| v.max(0.0));
        let z = h.dot(&self.w2.t()) + &self.b2;
        let loss = cross_entropy(&z, labels, self.temperature) + self.penalty(l2);
        let g = logit_grad(&z, labels, self.temperature);
        let mut da = g.dot(&self.w2);
        da.zip_mut_with(&a, |d, &pre| {
            if pre <= 0.0 {
                *d = 0.0
            }
        });
        let grad = MlpGrad {
            w1: da.t().dot(&x) + &(l2 * &self.w1),
            b1: da.sum_axis(Axis(0)),
            w2: g.t().dot(&h) + &(l2 * &self.w2),
            b2: g.sum_axis(Axis(0)),
        };
        (loss, grad)
    }

    fn step(&mut self, grad: &MlpGrad, lr: f64) {
        self.w1.scaled_add(-lr, &grad.w1);
        self.b1.scaled_add(-lr, &grad.b1);
        self.w2.scaled_add(-lr, &grad.w2);
        self.b2.scaled_add(-lr, &grad.b2);
    }
}

/// A trained model and the loss before each epoch's updates.
#[derive(Debug, Clone)]
pub struct Fit<M> {
    pub model: M,
    pub losses: Vec<f64>,
}

/// Runs the (mini-)batch loop shared by both model types.
fn descend<M>(
    mut model: M,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    loss_fn: impl Fn(&M, ArrayView2<'_, f64>, &[usize]) -> f64,
    grad_step: impl Fn(&mut M, ArrayView2<'_, f64>, &[usize]),
) -> Fit<M> {
    let n = labels.len();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        losses.push(loss_fn(&model, x, labels));
        match cfg.batch_size {
            Some(b) if b < n => {
                order.shuffle(rng);
                for chunk in order.chunks(b) {
                    let xb = x.select(Axis(0), chunk);
                    let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    grad_step(&mut model, xb.view(), &yb);
                }
            }
            _ => grad_step(&mut model, x, labels),
        }
    }
    Fit { model, losses }
}

pub fn train_linear(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<Fit<LinearSoftmaxModel>> {
    cfg.validate()?;
    check_training_data(x, labels, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = LinearSoftmaxModel::init(num_classes, x.ncols(), &mut rng);
    let (lr, l2) = (cfg.learning_rate, cfg.l2);
    Ok(descend(
        model,
        x,
        labels,
        cfg,
        &mut rng,
        |m, x, y| m.loss(x, y, l2),
        |m, x, y| {
            let (_, g) = m.loss_and_grad(x, y, l2);
            m.step(&g, lr);
        },
    ))
}

pub fn train_mlp(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
    hidden_dim: usize,
    cfg: &TrainConfig,
) -> Result<Fit<MlpModel>> {
    cfg.validate()?;
    check_training_data(x, labels, num_classes)?;
    if hidden_dim == 0 {
        return Err(Error::InvalidConfig(
            "latent dimension must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = MlpModel::init(num_classes, x.ncols(), hidden_dim, &mut rng);
    let (lr, l2) = (cfg.learning_rate, cfg.l2);
    Ok(descend(
        model,
        x,
        labels,
        cfg,
        &mut rng,
        |m, x, y| m.loss(x, y, l2),
        |m, x, y| {
            let (_, g) = m.loss_and_grad(x, y, l2);
            m.step(&g, lr);
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Classifier {
    Linear(LinearSoftmaxModel),
    Mlp(MlpModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_pred: Vec<usize>,
    pub probs: Array2<f64>,
    pub latents: Array2<f64>,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Linear(m) => m.num_classes(),
            Classifier::Mlp(m) => m.num_classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Classifier::Linear(m) => m.dim(),
            Classifier::Mlp(m) => m.input_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Classifier::Linear(m) => m.dim(),
            Classifier::Mlp(m) => m.latent_dim(),
        }
    }

    /// Class predictions, probabilities and latent representations.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Prediction> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let (latents, logits, temperature) = match self {
            Classifier::Linear(m) => (x.to_owned(), m.logits(x), m.temperature),
            Classifier::Mlp(m) => {
                let h = m.hidden(x);
                let z = h.dot(&m.w2.t()) + &m.b2;
                (h, z, m.temperature)
            }
        };
        let probs = softmax_rows(&logits, temperature);
        let y_pred = probs.rows().into_iter().map(argmax).collect();
        Ok(Prediction {
            y_pred,
            probs,
            latents,
        })
    }
}

impl Classifier {
    /// Class probabilities from latent representations alone, i.e. the
    /// linear head followed by the softmax.
    pub fn probs_from_latents(&self, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                found: h.ncols(),
            });
        }
        Ok(match self {
            Classifier::Linear(m) => m.probs(h),
            Classifier::Mlp(m) => softmax_rows(&(h.dot(&m.w2.t()) + &m.b2), m.temperature),
        })
    }
}

/// Shannon entropy of each row divided by `ln C`.
pub fn entropy_uncertainty(probs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let c = probs.ncols();
    if c < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    let log_c = (c as f64).ln();
    probs
        .rows()
        .into_iter()
        .enumerate()
        .map(|(row, p)| {
            if p.iter().any(|&v| !(v >= 0.0) || v > 1.0 + 1e-9) || (p.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidDistribution { row });
            }
            let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            Ok((h / log_c).clamp(0.0, 1.0))
        })
        .collect()
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: ArrayView2<'_, f64>) -> f64 {
    const MAX_ITERS: usize = 100;
    const TOL: f64 = 1e-10;
    let d = w.ncols();
    if d == 0 || w.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    if w.dot(&v).iter().all(|&x| x == 0.0) {
        // start vector lies in the null space; use the heaviest column instead
        v.fill(0.0);
        v[argmax(w.map_axis(Axis(0), |c| c.dot(&c)).view())] = 1.0;
    }
    let mut sigma = 0.0;
    for _ in 0..MAX_ITERS {
        let mut next = w.t().dot(&w.dot(&v));
        let norm = next.dot(&next).sqrt();
        next /= norm;
        let wv = w.dot(&next);
        let est = wv.dot(&wv).sqrt();
        v = next;
        let done = (est - sigma).abs() <= TOL * est.max(1.0);
        sigma = est;
        if done {
            break;
        }
    }
    sigma
}

/// Largest excess of `|f(x1) - f(x2)|` over its Lipschitz bound
/// `(1 / temperature) * sigma_max(W) * |x1 - x2|`; nonpositive when the bound
/// holds on every pair.
pub fn lipschitz_check(model: &LinearSoftmaxModel, pairs: &[(Array1<f64>, Array1<f64>)]) -> f64 {
    let sigma = spectral_norm(model.weights.view());
    let lipschitz = sigma / model.temperature;
    pairs
        .iter()
        .map(|(a, b)| {
            let fa = softmax(
                (model.weights.dot(a) + &model.bias).view(),
                model.temperature,
            );
            let fb = softmax(
                (model.weights.dot(b) + &model.bias).view(),
                model.temperature,
            );
            let df = (&fa - &fb).mapv(|v| v * v).sum().sqrt();
            let dx = (a - b).mapv(|v| v * v).sum().sqrt();
            df - lipschitz * dx
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::InvalidConfig(format!(
                "unknown model kind `{other}`"
            ))),
        }
    }
}

/// Trained model plus the input normalization it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Classifier,
    pub num_classes: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub normalization: NormalizationStats,
    pub train_config: TrainConfig,
}

impl Checkpoint {
    pub fn new(
        model: Classifier,
        normalization: NormalizationStats,
        train_config: TrainConfig,
    ) -> Self {
        Checkpoint {
            num_classes: model.num_classes(),
            input_dim: model.input_dim(),
            latent_dim: model.latent_dim(),
            model,
            normalization,
            train_config,
        }
    }

    /// Fits the input normalization on `train` and trains a model on its
    /// labelled rows. `latent_dim` is ignored for the linear model.
    pub fn train(
        train: &FeatureDataset,
        kind: ModelKind,
        latent_dim: usize,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let (x, y) = train.labelled();
        let stats = NormalizationStats::fit(x.view())?;
        let xn = stats.transform(x.view())?;
        let model = match kind {
            ModelKind::Linear => {
                Classifier::Linear(train_linear(xn.view(), &y, train.num_classes, cfg)?.model)
            }
            ModelKind::Mlp => {
                Classifier::Mlp(train_mlp(xn.view(), &y, train.num_classes, latent_dim, cfg)?.model)
            }
        };
        Ok(Checkpoint::new(model, stats, cfg.clone()))
    }

    /// Latents, predictions and normalized predictive entropy (as `u`) for
    /// every row of `ds`.
    pub fn embed(&self, ds: &FeatureDataset) -> Result<LatentDataset> {
        if ds.num_classes != self.num_classes {
            return Err(Error::InvalidDataset(format!(
                "dataset has {} classes, model {}",
                ds.num_classes, self.num_classes
            )));
        }
        let x = self.normalization.transform(ds.features.view())?;
        let p = self.model.predict(x.view())?;
        let u = entropy_uncertainty(p.probs.view())?;
        LatentDataset::new(
            ds.ids.clone(),
            p.latents,
            ds.y_true.clone(),
            p.y_pred,
            Some(u),
            self.num_classes,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_values() {
        assert_eq!(
            softmax(array![0.0, 0.0].view(), 1.0).to_vec(),
            vec![0.5, 0.5]
        );
        let big = softmax(array![1000.0, 0.0].view(), 1.0);
        assert_eq!(big[0], 1.0);
        assert!(big[1] >= 0.0 && big[1] < 1e-300);
        let p = softmax(array![1.0, 2.0, 3.0].view(), 1.0);
        // e^k / (e + e^2 + e^3)
        let e = std::f64::consts::E;
        let s = e + e * e + e * e * e;
        for (k, v) in p.iter().enumerate() {
            assert!((v - e.powi(k as i32 + 1) / s).abs() < 1e-15);
        }
        assert!((p[0] - 0.090031).abs() < 1e-6);
        assert!((p[1] - 0.244728).abs() < 1e-6);
        assert!((p[2] - 0.665241).abs() < 1e-6);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
        assert_eq!(argmax(array![0.2, 0.4, 0.4].view()), 1);
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let m = Classifier::Linear(LinearSoftmaxModel::zeros(3, 2));
        let p = m.predict(array![[1.0, 2.0], [-3.0, 0.5]].view()).unwrap();
        assert_eq!(p.y_pred, vec![0, 0]);
        for v in p.probs.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(m.predict(array![[1.0]].view()).is_err());
    }

    #[test]
    fn argmax_invariant_under_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = LinearSoftmaxModel::init(4, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((200, 3), || rng.random_range(-3.0..3.0));
        let reference = Classifier::Linear(base.clone())
            .predict(x.view())
            .unwrap()
            .y_pred;
        for t in [0.5, 1.0, 2.0] {
            let m = LinearSoftmaxModel {
                temperature: t,
                ..base.clone()
            };
            assert_eq!(
                Classifier::Linear(m).predict(x.view()).unwrap().y_pred,
                reference
            );
        }
    }

    #[test]
    fn entropy_extremes() {
        let u = entropy_uncertainty(array![[0.25, 0.25, 0.25, 0.25], [0.0, 1.0, 0.0, 0.0]].view())
            .unwrap();
        assert!((u[0] - 1.0).abs() < 1e-15);
        assert_eq!(u[1], 0.0);
        let u = entropy_uncertainty(array![[0.9, 0.1]].view()).unwrap();
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h - 0.325083).abs() < 1e-6);
        assert!((u[0] - h / 2f64.ln()).abs() < 1e-15);
        assert!((u[0] - 0.468996).abs() < 1e-6);
        assert!(matches!(
            entropy_uncertainty(array![[0.9, 0.3]].view()),
            Err(Error::InvalidDistribution { row: 0 })
        ));
    }

    #[test]
    fn separable_1d_reaches_full_accuracy() {
        let mut x = Array2::zeros((100, 1));
        let mut y = vec![0; 100];
        for i in 0..50 {
            x[[i, 0]] = -1.0;
            x[[50 + i, 0]] = 1.0;
            y[50 + i] = 1;
        }
        let fit = train_linear(x.view(), &y, 2, &TrainConfig::default()).unwrap();
        let p = Classifier::Linear(fit.model).predict(x.view()).unwrap();
        assert_eq!(p.y_pred, y);
    }

    #[test]
    fn full_batch_loss_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Array2::from_shape_simple_fn((120, 2), || rng.random_range(-2.0..2.0));
        let y: Vec<usize> = raw
            .rows()
            .into_iter()
            .map(|r| usize::from(r[0] + 0.3 * r[1] > 0.2))
            .collect();
        let stats = NormalizationStats::fit(raw.view()).unwrap();
        let x = stats.transform(raw.view()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 300,
            ..TrainConfig::default()
        };
        let fit = train_linear(x.view(), &y, 2, &cfg).unwrap();
        for w in fit.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let mlp = train_mlp(x.view(), &y, 2, 6, &cfg).unwrap();
        for w in mlp.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_simple_fn((60, 3), || rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: Some(16),
            seed: 99,
            ..TrainConfig::default()
        };
        let a = train_mlp(x.view(), &y, 3, 4, &cfg).unwrap().model;
        let b = train_mlp(x.view(), &y, 3, 4, &cfg).unwrap().model;
        assert_eq!(a, b);
        let other = train_mlp(x.view(), &y, 3, 4, &TrainConfig { seed: 100, ..cfg })
            .unwrap()
            .model;
        assert_ne!(a, other);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let x = array![[0.0], [1.0]];
        let y = [0, 1];
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: Some(0),
                ..TrainConfig::default()
            },
            TrainConfig {
                l2: -1.0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(train_linear(x.view(), &y, 2, &cfg).is_err());
        }
        assert!(train_linear(x.view(), &[0, 2], 2, &TrainConfig::default()).is_err());
        assert!(train_linear(array![[0.0]].view(), &[0], 2, &TrainConfig::default()).is_err());
    }

    #[test]
    fn mlp_latents_have_hidden_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MlpModel::init(2, 2, 8, &mut rng);
        let p = Classifier::Mlp(m)
            .predict(array![[0.1, 0.2], [0.3, -0.4]].view())
            .unwrap();
        assert_eq!(p.latents.dim(), (2, 8));
        assert!(p.latents.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn spectral_norm_known_values() {
        assert_eq!(spectral_norm(Array2::<f64>::zeros((2, 3)).view()), 0.0);
        let d = array![[3.0, 0.0], [0.0, -5.0]];
        assert!((spectral_norm(d.view()) - 5.0).abs() < 1e-9);
        // rank one: |u| |v|
        let r = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        assert!((spectral_norm(r.view()) - 14f64.sqrt() * 5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn lipschitz_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = LinearSoftmaxModel::init(3, 2, &mut rng);
        let x = array![0.3, -0.2];
        assert!(lipschitz_check(&m, &[(x.clone(), x.clone())]) <= 0.0);
        let zero = LinearSoftmaxModel::zeros(3, 2);
        assert!(lipschitz_check(&zero, &[(x, array![5.0, 5.0])]) <= 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ck = Checkpoint::new(
            Classifier::Mlp(MlpModel::init(3, 2, 5, &mut rng)),
            NormalizationStats::identity(2),
            TrainConfig::default(),
        );
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"kind\": \"mlp\""));
    }
}
