//! Telling original, watermarked and fine-tuned models apart from their
//! hidden-layer activations.
//!
//! Each model is run on the same inputs; rows whose prediction confidence
//! falls below a threshold are dropped, and the surviving activation rows are
//! labelled with their source model. A multinomial logistic regression is
//! then fit on those rows.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use thiserror::Error;

use crate::nn::train::{penalised, run_l2};
use crate::nn::{Dataset, DenseNet, NnError, TrainConfig};
use crate::store::write_atomic;

/// Source labels, in class-index order.
pub const SOURCES: [&str; 3] = ["original", "watermarked", "fine-tuned"];

/// L2 weight on the logistic-regression kernel.
pub const DEFAULT_L2: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("no sample reached confidence {threshold} (all {discarded} discarded)")]
    NothingRetained { threshold: f64, discarded: usize },
    #[error("training needs at least two distinct labels, found {0}")]
    SingleClass(usize),
    #[error("feature width {got} does not match the model's {expected}")]
    Width { expected: usize, got: usize },
    #[error("label {label} outside {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0} labels vs {1} predictions")]
    Length(usize, usize),
    #[error("feature sets come from different layers or widths")]
    Incompatible,
    #[error("{0}: {1}")]
    Io(std::path::PathBuf, std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationFeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub threshold: f64,
    pub kept: usize,
    pub discarded: usize,
}

impl ActivationFeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    /// Stacks several sets (e.g. one per source model) into one.
    pub fn concat(parts: &[ActivationFeatureSet]) -> Result<Self, DetectError> {
        let first = parts.first().ok_or(DetectError::Incompatible)?;
        if parts.iter().any(|p| p.width() != first.width()) {
            return Err(DetectError::Incompatible);
        }
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        Ok(Self {
            features: concatenate(Axis(0), &views).map_err(|_| DetectError::Incompatible)?,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            threshold: first.threshold,
            kept: parts.iter().map(|p| p.kept).sum(),
            discarded: parts.iter().map(|p| p.discarded).sum(),
        })
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            threshold: self.threshold,
            kept: rows.len(),
            discarded: self.discarded,
        }
    }

    /// Keeps the first `n` rows of each label, `n` being the smallest
    /// per-label count.
    pub fn balanced(&self) -> Self {
        let classes = self.labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let n = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
        let mut seen = vec![0usize; classes];
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i];
                seen[l] += 1;
                seen[l] <= n
            })
            .collect();
        self.select(&rows)
    }
}

/// Runs `net` on `inputs`, keeps the activation rows of `layer` whose
/// softmax maximum is at least `threshold`, and labels them `source`.
pub fn collect_features(
    net: &DenseNet,
    inputs: &Array2<f64>,
    layer: &str,
    threshold: f64,
    source: usize,
) -> Result<ActivationFeatureSet, DetectError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DetectError::Threshold(threshold));
    }
    let probs = net.predict(inputs)?;
    let acts = net.layer_activations(inputs, layer)?;
    let keep: Vec<usize> = probs
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, row)| row.fold(0.0f64, |m, &v| m.max(v)) >= threshold)
        .map(|(i, _)| i)
        .collect();
    let discarded = inputs.nrows() - keep.len();
    if keep.is_empty() {
        return Err(DetectError::NothingRetained { threshold, discarded });
    }
    Ok(ActivationFeatureSet {
        features: acts.select(Axis(0), &keep),
        labels: vec![source; keep.len()],
        threshold,
        kept: keep.len(),
        discarded,
    })
}

/// Multinomial logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    /// `[classes, features]`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub losses: Vec<f64>,
}

impl LogRegModel {
    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }

    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }

    /// Raw class scores before softmax.
    pub fn scores(&self, x: &Array2<f64>) -> Result<Array2<f64>, DetectError> {
        if x.ncols() != self.width() {
            return Err(DetectError::Width { expected: self.width(), got: x.ncols() });
        }
        Ok(self.standardize(x).dot(&self.weights.t()) + &self.bias)
    }
}

fn to_dataset(x: Array2<f64>, labels: &[usize], classes: usize) -> Dataset {
    let mut onehot = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }
    Dataset { features: x, labels: onehot, classes }
}

fn as_net(model: &LogRegModel) -> DenseNet {
    DenseNet::from_layers(vec![crate::nn::DenseLayer {
        kernel: model.weights.t().to_owned(),
        bias: model.bias.clone(),
        activation: crate::nn::Activation::Softmax,
    }])
    .expect("single softmax layer")
}

/// Fits the classifier with the configured optimizer and an L2 penalty of
/// `l2` on the weights. Class count is `max label + 1`.
pub fn train_logreg(
    features: &ActivationFeatureSet,
    config: &TrainConfig,
    l2: f64,
) -> Result<LogRegModel, DetectError> {
    config.validate()?;
    let mut distinct = features.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(DetectError::SingleClass(distinct.len()));
    }
    let classes = distinct.last().copied().unwrap_or(0) + 1;
    let x = &features.features;
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut model = LogRegModel {
        weights: Array2::zeros((classes, x.ncols())),
        bias: Array1::zeros(classes),
        mean,
        scale,
        losses: Vec::new(),
    };
    let data = to_dataset(model.standardize(x), &features.labels, classes);
    let out = run_l2(&as_net(&model), &data, config, l2)?;
    let layer = &out.net.layers()[0];
    model.weights = layer.kernel.t().to_owned();
    model.bias = layer.bias.clone();
    model.losses = out.losses;
    Ok(model)
}

/// Penalised loss and gradients `(d/dW [classes, features], d/db)` on
/// standardized inputs.
pub fn logreg_loss_and_grad(
    model: &LogRegModel,
    features: &Array2<f64>,
    labels: &[usize],
    l2: f64,
) -> Result<(f64, Array2<f64>, Array1<f64>), DetectError> {
    let data = to_dataset(model.standardize(features), labels, model.classes());
    let (loss, grads) = penalised(&as_net(model), &data.features, &data.labels, l2)?;
    Ok((loss, grads[0].kernel.t().to_owned(), grads[0].bias.clone()))
}

/// Softmax argmax per row (ties to the lowest index) plus the probabilities.
pub fn classify(model: &LogRegModel, features: &Array2<f64>) -> Result<(Vec<usize>, Array2<f64>), DetectError> {
    let mut p = model.scores(features)?;
    crate::nn::net::softmax_rows(&mut p);
    Ok((crate::nn::net::argmax_rows(&p), p))
}

/// `counts[t][p]`: row = true label, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix, DetectError> {
    if truth.len() != pred.len() {
        return Err(DetectError::Length(truth.len(), pred.len()));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        for label in [t, p] {
            if label >= classes {
                return Err(DetectError::Label { label, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    /// Comma-separated integers, one row per true class, no header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn summary(&self, names: &[&str]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples {}", self.total());
        let _ = writeln!(s, "errors {}", self.total() - self.correct());
        let _ = writeln!(s, "accuracy {:.6}", self.accuracy());
        for (i, row) in self.counts.iter().enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            let _ = writeln!(s, "{name}: {} of {} correct", row[i], row.iter().sum::<u64>());
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DetectError> {
        write_atomic(path, self.to_csv().as_bytes()).map_err(|e| DetectError::Io(path.to_path_buf(), e))
    }
}
