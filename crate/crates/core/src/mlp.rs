//! Fully-connected ReLU classifier with a softmax head, trained with
//! mini-batch Adam on categorical cross-entropy.
//!
//! Layers are stored as `out × in` weight matrices. Batches are
//! `samples × features`; a layer computes `Z = A·Wᵀ + b`. Hidden layers apply
//! ReLU followed by inverted dropout (train mode only); the output layer
//! applies a row-wise softmax.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::AnnotatedDataset;
use crate::rng::{self, Rng};

pub const FORMAT_VERSION: u32 = 1;
/// Lower clamp on probabilities inside the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl MlpConfig {
    /// The default architecture: 1000/250/250 hidden units with dropout
    /// 0.5/0.4/0.4, 50 epochs, batches of 30.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![
                HiddenLayer { width: 1000, dropout: 0.5 },
                HiddenLayer { width: 250, dropout: 0.4 },
                HiddenLayer { width: 250, dropout: 0.4 },
            ],
            output_dim,
            epochs: 50,
            batch_size: 30,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("input and output dimensions must be at least 1"));
        }
        if let Some(h) = self.hidden.iter().find(|h| h.width == 0) {
            return Err(Error::config(format!("hidden layer width must be at least 1 (got {})", h.width)));
        }
        if let Some(h) = self.hidden.iter().find(|h| !(0.0..1.0).contains(&h.dropout)) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", h.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LayerRecord", try_from = "LayerRecord")]
pub struct Layer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub dropout: f64,
}

/// On-disk form of a layer: nested decimal arrays.
#[derive(Serialize, Deserialize)]
struct LayerRecord {
    shape: [usize; 2],
    activation: Activation,
    dropout: f64,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<Layer> for LayerRecord {
    fn from(l: Layer) -> Self {
        Self {
            shape: [l.weights.nrows(), l.weights.ncols()],
            activation: l.activation,
            dropout: l.dropout,
            weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: l.bias.to_vec(),
        }
    }
}

impl TryFrom<LayerRecord> for Layer {
    type Error = String;

    fn try_from(r: LayerRecord) -> std::result::Result<Self, String> {
        let [out, inp] = r.shape;
        if r.weights.len() != out || r.weights.iter().any(|w| w.len() != inp) || r.bias.len() != out {
            return Err(format!("layer arrays do not match shape {out}x{inp}"));
        }
        let flat: Vec<f64> = r.weights.into_iter().flatten().collect();
        Ok(Layer {
            weights: Array2::from_shape_vec((out, inp), flat).map_err(|e| e.to_string())?,
            bias: Array1::from(r.bias),
            activation: r.activation,
            dropout: r.dropout,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub format_version: u32,
    pub config: MlpConfig,
    pub class_names: Vec<String>,
    pub layers: Vec<Layer>,
}

/// Where dropout masks come from during a forward pass.
pub enum Mode<'a> {
    Infer,
    /// Draw fresh masks from the generator.
    Train(&'a mut Rng),
}

/// Intermediate values of a forward pass, as needed by [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the batch itself).
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activations per layer; the last entry holds the logits.
    pub pre_activations: Vec<Array2<f64>>,
    /// Scaled dropout masks per hidden layer (`None` when no dropout was applied).
    pub masks: Vec<Option<Array2<f64>>>,
    pub probabilities: Array2<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("model has an output layer")
    }
}

pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean cross-entropy of `labels` under row-stochastic `probabilities`.
pub fn loss(probabilities: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        // `max` would swallow NaN, so it is passed through explicitly.
        .map(|(i, &y)| match probabilities[[i, y]] {
            p if p.is_nan() => f64::NAN,
            p => -p.max(PROB_FLOOR).ln(),
        })
        .sum::<f64>()
        / n
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &MlpConfig, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.output_dim {
            return Err(Error::Dimension {
                expected: config.output_dim,
                got: class_names.len(),
            });
        }
        let mut rng = rng::substream(config.seed, rng::INIT, 0);
        let mut dims = vec![config.input_dim];
        dims.extend(config.hidden.iter().map(|h| h.width));
        dims.push(config.output_dim);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let hidden = l + 1 < n_layers;
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng)),
                    bias: Array1::zeros(fan_out),
                    activation: if hidden { Activation::Relu } else { Activation::Softmax },
                    dropout: if hidden { config.hidden[l].dropout } else { 0.0 },
                }
            })
            .collect();
        Ok(Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            class_names,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("model has an output layer").weights.nrows()
    }

    fn check_width(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode<'_>) -> Result<ForwardCache> {
        match mode {
            Mode::Infer => self.forward_impl(x, |_, _| None),
            Mode::Train(rng) => self.forward_impl(x, |layer, shape| {
                let rate = layer.dropout;
                (rate > 0.0).then(|| {
                    let keep = 1.0 - rate;
                    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                })
            }),
        }
    }

    /// Forward pass with given (already scaled) dropout masks, one per hidden layer.
    pub fn forward_with_masks(&self, x: ArrayView2<f64>, masks: &[Option<Array2<f64>>]) -> Result<ForwardCache> {
        let mut it = masks.iter();
        self.forward_impl(x, |_, _| it.next().cloned().flatten())
    }

    fn forward_impl(
        &self,
        x: ArrayView2<f64>,
        mut mask_for: impl FnMut(&Layer, (usize, usize)) -> Option<Array2<f64>>,
    ) -> Result<ForwardCache> {
        self.check_width(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::new();
        let mut a = x.to_owned();
        for layer in &self.layers {
            let z = a.dot(&layer.weights.t()) + &layer.bias;
            inputs.push(a);
            a = match layer.activation {
                Activation::Relu => {
                    let mut h = z.mapv(|v| v.max(0.0));
                    let mask = mask_for(layer, h.dim());
                    if let Some(m) = &mask {
                        h *= m;
                    }
                    masks.push(mask);
                    h
                }
                Activation::Softmax => softmax_rows(&z),
            };
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs,
            pre_activations: pre,
            masks,
            probabilities: a,
        })
    }

    /// Pre-softmax outputs in inference mode.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, Mode::Infer)?.pre_activations.pop().expect("output layer"))
    }

    /// Gradients of the mean cross-entropy, masks held fixed.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Gradients {
        let n = labels.len() as f64;
        let mut dz = cache.probabilities.clone();
        for (i, &y) in labels.iter().enumerate() {
            dz[[i, y]] -= 1.0;
        }
        dz /= n;
        let n_layers = self.layers.len();
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            weights.push(dz.t().dot(&cache.inputs[l]));
            biases.push(dz.sum_axis(Axis(0)));
            if l == 0 {
                break;
            }
            let mut da = dz.dot(&self.layers[l].weights);
            if let Some(m) = &cache.masks[l - 1] {
                da *= m;
            }
            Zip::from(&mut da)
                .and(&cache.pre_activations[l - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            dz = da;
        }
        weights.reverse();
        biases.reverse();
        Gradients { weights, biases }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Prediction> {
        let probabilities = self.forward(x, Mode::Infer)?.probabilities;
        let labels = probabilities.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        Ok(Prediction { probabilities, labels })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::data(format!("unsupported model format_version {}", m.format_version)));
        }
        for w in m.layers.windows(2) {
            if w[0].weights.nrows() != w[1].weights.ncols() {
                return Err(Error::data("layer dimensions do not chain"));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probabilities: Array2<f64>,
    pub labels: Vec<usize>,
}

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }
}

/// One Adam update of every tensor in `params`. Advances `state.t` once.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, hyper: &AdamHyper) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((theta, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(theta.len(), g.len());
        for i in 0..theta.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean mini-batch loss per epoch.
    pub history: Vec<f64>,
}

/// Trains a fresh model on `data`. `config.input_dim`/`output_dim` must match it.
pub fn train(data: &AnnotatedDataset, config: &MlpConfig) -> Result<TrainOutcome> {
    if data.n_classes() < 2 {
        return Err(Error::data("training needs at least two classes"));
    }
    if config.input_dim != data.n_features() {
        return Err(Error::Dimension {
            expected: config.input_dim,
            got: data.n_features(),
        });
    }
    if config.output_dim != data.n_classes() {
        return Err(Error::Dimension {
            expected: config.output_dim,
            got: data.n_classes(),
        });
    }
    let mut model = MlpModel::init(config, data.class_names.clone())?;
    let x = data.matrix.sample_major();
    let n = x.nrows();
    let mut state = AdamState::new(
        model
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()]),
    );
    let mut dropout_rng = rng::substream(config.seed, rng::DROPOUT, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle = rng::substream(config.seed, rng::SHUFFLE, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let cache = model.forward(xb.view(), Mode::Train(&mut dropout_rng))?;
            let l = loss(&cache.probabilities, &yb);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("loss became {l} in epoch {epoch}")));
            }
            total += l;
            batches += 1;
            let g = model.backward(&cache, &yb);
            let mut params: Vec<&mut [f64]> = Vec::new();
            for layer in &mut model.layers {
                params.push(layer.weights.as_slice_mut().expect("standard layout"));
                params.push(layer.bias.as_slice_mut().expect("contiguous"));
            }
            let grads: Vec<&[f64]> = g
                .weights
                .iter()
                .zip(&g.biases)
                .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("contiguous")])
                .collect();
            adam_step(&mut params, &grads, &mut state, &config.adam);
            if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
            }
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainOutcome { model, history })
}
