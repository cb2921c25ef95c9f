use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{Optimizer, TrainConfig};
use super::NnError;
use crate::store::{self, write_atomic, ModelWeights, WeightTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        }
    }

    fn parse(s: &str) -> Result<Self, NnError> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            other => Err(NnError::Arch(format!("unknown activation {other:?}"))),
        }
    }
}

/// `kernel` is `[inputs, outputs]`, so a layer computes `x @ kernel + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub kernel: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.kernel.ncols()
    }
}

/// Gradients for one layer, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub kernel: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

pub fn layer_name(index: usize) -> String {
    format!("dense{index}")
}

pub fn kernel_name(index: usize) -> String {
    format!("dense{index}.kernel")
}

pub fn bias_name(index: usize) -> String {
    format!("dense{index}.bias")
}

impl DenseNet {
    /// Builds a network from `sizes = [input, hidden..., classes]` with
    /// uniform fan-in initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// and zero biases. Hidden layers use ReLU, the last softmax.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Arch(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let limit = (6.0 / w[0] as f64).sqrt();
                let kernel = Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-limit..limit));
                DenseLayer {
                    kernel,
                    bias: Array1::zeros(w[1]),
                    activation: if i == last { Activation::Softmax } else { Activation::Relu },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Arch("no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NnError::Arch(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(NnError::Arch(format!("layer {i} bias length mismatch")));
            }
            let is_last = i + 1 == layers.len();
            if (l.activation == Activation::Softmax) != is_last {
                return Err(NnError::Arch("exactly one softmax layer, at the end, is required".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs()))
            .collect()
    }

    fn check_width(&self, x: &Array2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::Dimension { expected: self.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    /// Post-activation outputs of every layer, input excluded.
    fn forward_all(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &outs[i - 1] };
            let mut z = input.dot(&layer.kernel) + &layer.bias;
            match layer.activation {
                Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
                Activation::Softmax => softmax_rows(&mut z),
            }
            outs.push(z);
        }
        outs
    }

    /// Per-class probability rows.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_width(x)?;
        Ok(self.forward_all(x).pop().expect("non-empty"))
    }

    pub fn predict_labels(&self, x: &Array2<f64>) -> Result<Vec<usize>, NnError> {
        Ok(argmax_rows(&self.predict(x)?))
    }

    /// Resolves `dense{i}` (or `dense{i}.kernel`) to a layer index.
    pub fn layer_index(&self, name: &str) -> Result<usize, NnError> {
        let base = name.strip_suffix(".kernel").unwrap_or(name);
        (0..self.layers.len())
            .find(|&i| layer_name(i) == base)
            .ok_or_else(|| NnError::UnknownLayer(name.to_string()))
    }

    /// Post-activation output of the named layer, one row per sample.
    pub fn layer_activations(&self, x: &Array2<f64>, layer: &str) -> Result<Array2<f64>, NnError> {
        let idx = self.layer_index(layer)?;
        self.check_width(x)?;
        let mut outs = self.forward_all(x);
        outs.truncate(idx + 1);
        Ok(outs.pop().expect("idx < len"))
    }

    /// Mean cross-entropy and its gradients for every layer.
    pub fn loss_and_grads(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Vec<LayerGrad>), NnError> {
        self.check_width(x)?;
        if y.ncols() != self.classes() || y.nrows() != x.nrows() {
            return Err(NnError::Dimension { expected: self.classes(), got: y.ncols() });
        }
        let n = x.nrows() as f64;
        let outs = self.forward_all(x);
        let probs = outs.last().expect("non-empty");
        let loss = cross_entropy(probs, y);

        let mut grads = Vec::with_capacity(self.layers.len());
        // Softmax + cross-entropy: dL/dz = (p - y) / n.
        let mut delta = (probs - y) / n;
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { x } else { &outs[i - 1] };
            grads.push(LayerGrad {
                kernel: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].kernel.t());
                Zip::from(&mut back).and(&outs[i - 1]).for_each(|b, &a| {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }

    pub fn loss(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64, NnError> {
        Ok(cross_entropy(&self.predict(x)?, y))
    }

    /// Tensors in layer order: `dense{i}.kernel`, `dense{i}.bias`.
    pub fn to_weights(&self) -> ModelWeights {
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            tensors.push(
                WeightTensor::f64(kernel_name(i), vec![l.inputs(), l.outputs()], l.kernel.iter().copied().collect())
                    .expect("kernel shape"),
            );
            tensors.push(WeightTensor::f64(bias_name(i), vec![l.outputs()], l.bias.to_vec()).expect("bias shape"));
        }
        ModelWeights::new(tensors).expect("unique names")
    }

    /// Rebuilds a network of the given architecture from stored tensors.
    pub fn from_weights(arch: &Architecture, weights: &ModelWeights) -> Result<Self, NnError> {
        let mut layers = Vec::with_capacity(arch.sizes.len() - 1);
        for (i, w) in arch.sizes.windows(2).enumerate() {
            let k = weights.get(&kernel_name(i))?;
            let b = weights.get(&bias_name(i))?;
            if k.shape() != [w[0], w[1]] || b.shape() != [w[1]] {
                return Err(NnError::Arch(format!(
                    "layer {i}: stored shapes {:?}/{:?} do not match the architecture",
                    k.shape(),
                    b.shape()
                )));
            }
            layers.push(DenseLayer {
                kernel: Array2::from_shape_vec((w[0], w[1]), k.values().to_vec())
                    .map_err(|e| NnError::Arch(e.to_string()))?,
                bias: Array1::from_vec(b.values().to_vec()),
                activation: arch.activations[i],
            });
        }
        Self::from_layers(layers)
    }
}

pub fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn cross_entropy(probs: &Array2<f64>, onehot: &Array2<f64>) -> f64 {
    let n = probs.nrows().max(1) as f64;
    let total: f64 = Zip::from(probs)
        .and(onehot)
        .fold(0.0, |acc, &p, &y| if y > 0.0 { acc - y * if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() } } else { acc });
    total / n
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Layer sizes and activations, plus the training setup the model was built
/// with (so fine-tuning can reuse the same optimizer).
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub train: TrainConfig,
}

const ARCH_HEADER: &str = "chaosmark-arch 1";

impl Architecture {
    pub fn of(net: &DenseNet, train: &TrainConfig) -> Self {
        Self {
            sizes: net.sizes(),
            activations: net.layers().iter().map(|l| l.activation).collect(),
            train: train.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{ARCH_HEADER}");
        let _ = writeln!(s, "input {}", self.sizes[0]);
        for (i, (size, act)) in self.sizes[1..].iter().zip(&self.activations).enumerate() {
            let _ = writeln!(s, "layer {} {} {}", layer_name(i), size, act.tag());
        }
        let t = &self.train;
        match t.optimizer {
            Optimizer::Sgd { momentum } => {
                let _ = writeln!(s, "optimizer sgd");
                let _ = writeln!(s, "momentum {momentum:?}");
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let _ = writeln!(s, "optimizer adam");
                let _ = writeln!(s, "beta1 {beta1:?}");
                let _ = writeln!(s, "beta2 {beta2:?}");
                let _ = writeln!(s, "adam_eps {eps:?}");
            }
        }
        let _ = writeln!(s, "learning_rate {:?}", t.learning_rate);
        let _ = writeln!(s, "batch_size {}", t.batch_size);
        let _ = writeln!(s, "epochs {}", t.epochs);
        let _ = writeln!(s, "seed {}", t.seed);
        s
    }

    pub fn parse(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some(ARCH_HEADER) {
            return Err(NnError::Arch("missing architecture header".into()));
        }
        let bad = |l: &str| NnError::Arch(format!("cannot parse line {l:?}"));
        let mut sizes = Vec::new();
        let mut activations = Vec::new();
        let mut train = TrainConfig::default();
        let (mut opt, mut momentum, mut beta1, mut beta2, mut aeps) = ("sgd".to_string(), 0.9, 0.9, 0.999, 1e-8);
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| parts.get(i).ok_or_else(|| bad(line));
            match parts[0] {
                "input" => sizes.insert(0, num(1)?.parse().map_err(|_| bad(line))?),
                "layer" => {
                    sizes.push(num(2)?.parse().map_err(|_| bad(line))?);
                    activations.push(Activation::parse(num(3)?)?);
                }
                "optimizer" => opt = num(1)?.to_string(),
                "momentum" => momentum = num(1)?.parse().map_err(|_| bad(line))?,
                "beta1" => beta1 = num(1)?.parse().map_err(|_| bad(line))?,
                "beta2" => beta2 = num(1)?.parse().map_err(|_| bad(line))?,
                "adam_eps" => aeps = num(1)?.parse().map_err(|_| bad(line))?,
                "learning_rate" => train.learning_rate = num(1)?.parse().map_err(|_| bad(line))?,
                "batch_size" => train.batch_size = num(1)?.parse().map_err(|_| bad(line))?,
                "epochs" => train.epochs = num(1)?.parse().map_err(|_| bad(line))?,
                "seed" => train.seed = num(1)?.parse().map_err(|_| bad(line))?,
                _ => {}
            }
        }
        train.optimizer = match opt.as_str() {
            "sgd" => Optimizer::Sgd { momentum },
            "adam" => Optimizer::Adam { beta1, beta2, eps: aeps },
            o => return Err(NnError::Arch(format!("unknown optimizer {o:?}"))),
        };
        if sizes.len() < 2 || activations.len() + 1 != sizes.len() {
            return Err(NnError::Arch("architecture needs an input and at least one layer".into()));
        }
        Ok(Self { sizes, activations, train })
    }
}

/// Descriptor path for a model file: same stem, `.arch` extension.
pub fn arch_path(model: &Path) -> std::path::PathBuf {
    model.with_extension("arch")
}

/// Saves weights (CWMT) and the architecture descriptor next to them.
pub fn save_model(net: &DenseNet, train: &TrainConfig, path: &Path) -> Result<(), NnError> {
    store::save_weights(&net.to_weights(), path)?;
    let arch = Architecture::of(net, train).to_text();
    write_atomic(&arch_path(path), arch.as_bytes()).map_err(|e| NnError::Io(arch_path(path), e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(DenseNet, Architecture), NnError> {
    let text = std::fs::read_to_string(arch_path(path)).map_err(|e| NnError::Io(arch_path(path), e))?;
    let arch = Architecture::parse(&text)?;
    let weights = store::load_weights(path)?;
    Ok((DenseNet::from_weights(&arch, &weights)?, arch))
}
