use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::net::{DenseNet, LayerGrad};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: Optimizer::adam(), learning_rate: 1e-3, batch_size: 32, epochs: 15, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        self.validate_shape()
    }

    fn validate_shape(&self) -> Result<(), NnError> {
        if self.epochs == 0 {
            return Err(NnError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch size must be >= 1".into()));
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(NnError::Config(format!("momentum {momentum} not in [0, 1)")))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(NnError::Config("adam coefficients out of range".into()))
            }
            _ => Ok(()),
        }
    }

    /// The configuration used for fine-tuning: same optimizer, a tenth of
    /// the learning rate.
    pub fn fine_tune(&self, epochs: usize) -> Self {
        Self { learning_rate: self.learning_rate / 10.0, epochs, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DenseNet,
    /// Mean mini-batch loss per epoch.
    pub losses: Vec<f64>,
}

struct Moments {
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    step: i32,
}

impl Moments {
    fn zeros(net: &DenseNet) -> Self {
        let z: Vec<LayerGrad> = net
            .layers()
            .iter()
            .map(|l| LayerGrad { kernel: Array2::zeros(l.kernel.raw_dim()), bias: Array1::zeros(l.bias.len()) })
            .collect();
        Self { m: z.clone(), v: z, step: 0 }
    }
}

fn apply(net: &mut DenseNet, grads: &[LayerGrad], st: &mut Moments, opt: Optimizer, lr: f64) {
    st.step += 1;
    for ((layer, g), (m, v)) in net.layers_mut().iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
        match opt {
            Optimizer::Sgd { momentum } => {
                m.kernel.zip_mut_with(&g.kernel, |mi, &gi| *mi = momentum * *mi + gi);
                m.bias.zip_mut_with(&g.bias, |mi, &gi| *mi = momentum * *mi + gi);
                layer.kernel.scaled_add(-lr, &m.kernel);
                layer.bias.scaled_add(-lr, &m.bias);
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(st.step);
                let c2 = 1.0 - beta2.powi(st.step);
                let step = |p: &mut f64, gi: f64, mi: &mut f64, vi: &mut f64| {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                };
                ndarray::Zip::from(&mut layer.kernel)
                    .and(&g.kernel)
                    .and(&mut m.kernel)
                    .and(&mut v.kernel)
                    .for_each(|p, &gi, mi, vi| step(p, gi, mi, vi));
                ndarray::Zip::from(&mut layer.bias)
                    .and(&g.bias)
                    .and(&mut m.bias)
                    .and(&mut v.bias)
                    .for_each(|p, &gi, mi, vi| step(p, gi, mi, vi));
            }
        }
    }
}

fn run(net: &DenseNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    run_l2(net, data, cfg, 0.0)
}

/// Training loop with an optional L2 penalty `l2/2 * ||kernel||^2` summed
/// over every kernel. Biases are not penalised.
pub(crate) fn run_l2(net: &DenseNet, data: &Dataset, cfg: &TrainConfig, l2: f64) -> Result<TrainOutcome, NnError> {
    if data.dim() != net.input_dim() {
        return Err(NnError::Dimension { expected: net.input_dim(), got: data.dim() });
    }
    if data.classes != net.classes() {
        return Err(NnError::Dimension { expected: net.classes(), got: data.classes });
    }
    if data.is_empty() {
        return Err(NnError::Data("empty training set".into()));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = Moments::zeros(&net);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.features.select(Axis(0), chunk);
            let y = data.labels.select(Axis(0), chunk);
            let (loss, grads) = penalised(&net, &x, &y, l2)?;
            if !loss.is_finite() || grads.iter().any(|g| g.kernel.iter().any(|v| !v.is_finite())) {
                return Err(NnError::NonFinite { epoch, step });
            }
            apply(&mut net, &grads, &mut state, cfg.optimizer, cfg.learning_rate);
            total += loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(TrainOutcome { net, losses })
}

pub(crate) fn penalised(
    net: &DenseNet,
    x: &ndarray::Array2<f64>,
    y: &ndarray::Array2<f64>,
    l2: f64,
) -> Result<(f64, Vec<LayerGrad>), NnError> {
    let (mut loss, mut grads) = net.loss_and_grads(x, y)?;
    if l2 > 0.0 {
        for (g, layer) in grads.iter_mut().zip(net.layers()) {
            loss += 0.5 * l2 * layer.kernel.iter().map(|w| w * w).sum::<f64>();
            g.kernel.scaled_add(l2, &layer.kernel);
        }
    }
    Ok((loss, grads))
}

/// Mini-batch training on cross-entropy. Single-threaded; the whole
/// trajectory is fixed by `config.seed`.
pub fn train(net: &DenseNet, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, NnError> {
    config.validate()?;
    run(net, data, config)
}

/// Continued training with the base optimizer at `base.learning_rate / 10`.
pub fn fine_tune(net: &DenseNet, data: &Dataset, base: &TrainConfig, epochs: usize) -> Result<TrainOutcome, NnError> {
    train(net, data, &base.fine_tune(epochs))
}
