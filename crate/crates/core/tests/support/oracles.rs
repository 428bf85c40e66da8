//! Independent reference computations shared by the oracle and acceptance
//! tests. Nothing here calls the code path it is used to check.

#![allow(dead_code)]

use exprsaug::attribution::{deeplift_scores, KnockoutMode};
use exprsaug::mlp::{Activation, AdamHyper, HiddenLayer, Layer, MlpConfig, MlpModel};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random ReLU network with the given widths and non-zero biases.
pub fn random_model(widths: &[usize], dropout: f64, seed: u64) -> MlpModel {
    let (input, rest) = widths.split_first().unwrap();
    let (output, hidden) = rest.split_last().unwrap();
    let cfg = MlpConfig {
        input_dim: *input,
        hidden: hidden.iter().map(|&width| HiddenLayer { width, dropout }).collect(),
        output_dim: *output,
        epochs: 1,
        batch_size: 8,
        adam: AdamHyper::default(),
        seed,
    };
    let mut m = MlpModel::init(&cfg, (0..*output).map(|k| format!("c{k}")).collect()).unwrap();
    let mut r = test_rng(seed ^ 0xb1a5);
    for l in &mut m.layers {
        l.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    m
}

/// Random widths `input-h1-...-output` with every width ≤ the given caps.
pub fn random_widths(r: &mut ChaCha8Rng, caps: &[usize]) -> Vec<usize> {
    caps.iter()
        .enumerate()
        .map(|(i, &c)| if i + 1 == caps.len() { r.random_range(2..=c) } else { r.random_range(1..=c) })
        .collect()
}

pub fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random::<f64>())
}

/// Mean cross-entropy written out scalar by scalar.
pub fn scalar_loss(model: &MlpModel, x: ArrayView2<f64>, y: &[usize], masks: &[Option<Array2<f64>>]) -> f64 {
    let mut total = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut a: Vec<f64> = row.to_vec();
        for (l, layer) in model.layers.iter().enumerate() {
            let (out, inp) = layer.weights.dim();
            let mut z = vec![0.0; out];
            for o in 0..out {
                let mut s = layer.bias[o];
                for j in 0..inp {
                    s += layer.weights[[o, j]] * a[j];
                }
                z[o] = s;
            }
            a = match layer.activation {
                Activation::Relu => z
                    .iter()
                    .enumerate()
                    .map(|(o, &v)| v.max(0.0) * masks[l].as_ref().map_or(1.0, |m| m[[i, o]]))
                    .collect(),
                Activation::Softmax => {
                    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                }
            };
        }
        total -= a[y[i]].max(1e-12).ln();
    }
    total / y.len() as f64
}

/// Max relative error between analytic gradients and central differences.
pub fn gradient_check(model: &MlpModel, x: ArrayView2<f64>, y: &[usize], masks: &[Option<Array2<f64>>], h: f64) -> f64 {
    let cache = model.forward_with_masks(x, masks).unwrap();
    let g = model.backward(&cache, y);
    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for l in 0..model.layers.len() {
        let (out, inp) = model.layers[l].weights.dim();
        for o in 0..out {
            for j in 0..inp {
                let w0 = model.layers[l].weights[[o, j]];
                probe.layers[l].weights[[o, j]] = w0 + h;
                let up = scalar_loss(&probe, x, y, masks);
                probe.layers[l].weights[[o, j]] = w0 - h;
                let down = scalar_loss(&probe, x, y, masks);
                probe.layers[l].weights[[o, j]] = w0;
                worst = worst.max(rel(g.weights[l][[o, j]], (up - down) / (2.0 * h)));
            }
            let b0 = model.layers[l].bias[o];
            probe.layers[l].bias[o] = b0 + h;
            let up = scalar_loss(&probe, x, y, masks);
            probe.layers[l].bias[o] = b0 - h;
            let down = scalar_loss(&probe, x, y, masks);
            probe.layers[l].bias[o] = b0;
            worst = worst.max(rel(g.biases[l][o], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// Logits by explicit loops.
pub fn scalar_logits(model: &MlpModel, x: ArrayView1<f64>) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let (out, inp) = layer.weights.dim();
        let z: Vec<f64> = (0..out)
            .map(|o| layer.bias[o] + (0..inp).map(|j| layer.weights[[o, j]] * a[j]).sum::<f64>())
            .collect();
        a = if l == last { z } else { z.iter().map(|v| v.max(0.0)).collect() };
    }
    a
}

/// Worst ratio `|Σ_j C − Δlogit| / max(1e-5, 1e-6·|Δlogit|)` over samples and classes.
pub fn summation_to_delta_ratio(model: &MlpModel, xs: ArrayView2<f64>) -> f64 {
    let c = deeplift_scores(model, xs, None).unwrap();
    let zero = Array1::zeros(model.input_dim());
    let base = scalar_logits(model, zero.view());
    let mut worst: f64 = 0.0;
    for (i, x) in xs.rows().into_iter().enumerate() {
        let logits = scalar_logits(model, x);
        for k in 0..model.output_dim() {
            let delta = logits[k] - base[k];
            let sum: f64 = (0..model.input_dim()).map(|j| c.scores[[i, j, k]]).sum();
            worst = worst.max((sum - delta).abs() / (1e-6 * delta.abs()).max(1e-5));
        }
    }
    worst
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Replays a knockout: orders features by D2 against the target, zeroes them
/// one by one and re-predicts the sample from scratch after each removal.
/// Returns `(steps, flipped)`.
pub fn knockout_replay(model: &MlpModel, x: ArrayView1<f64>, mode: KnockoutMode) -> (usize, bool) {
    let d = model.input_dim();
    let predict = |v: &Array1<f64>| argmax(model.logits(v.view().insert_axis(ndarray::Axis(0))).unwrap().row(0).as_slice().unwrap());
    let mut cur = x.to_owned();
    let own = predict(&cur);
    let target = match mode {
        KnockoutMode::Similarity(t) => t,
        KnockoutMode::Stability => {
            let l = model.logits(x.insert_axis(ndarray::Axis(0))).unwrap();
            let mut best: Option<usize> = None;
            for k in 0..model.output_dim() {
                if k != own && best.is_none_or(|b| l[[0, k]] > l[[0, b]]) {
                    best = Some(k);
                }
            }
            best.unwrap()
        }
    };
    if target == own {
        return (0, true);
    }
    let c = deeplift_scores(model, x.insert_axis(ndarray::Axis(0)), None).unwrap();
    let d2: Vec<f64> = (0..d).map(|j| c.scores[[0, j, own]] - c.scores[[0, j, target]]).collect();
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort on descending D2 keeps lower indices first among ties
    order.sort_by(|&a, &b| d2[b].partial_cmp(&d2[a]).unwrap());
    for (step, &j) in order.iter().enumerate() {
        cur[j] = 0.0;
        let p = predict(&cur);
        let flipped = match mode {
            KnockoutMode::Similarity(t) => p == t,
            KnockoutMode::Stability => p != own,
        };
        if flipped {
            return (step + 1, true);
        }
    }
    (d, false)
}

pub fn gini_of(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

/// Exhaustive CART search: every feature, every midpoint, partition rebuilt
/// from scratch. Ties keep the first (lowest feature, lowest threshold).
pub fn brute_best_split(values: ArrayView2<f64>, labels: &[usize], k: usize, samples: &[usize]) -> Option<(usize, f64, f64)> {
    let count = |idx: &mut dyn Iterator<Item = usize>| {
        let mut c = vec![0usize; k];
        for s in idx {
            c[labels[s]] += 1;
        }
        c
    };
    let parent = count(&mut samples.iter().copied());
    let n = samples.len() as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..values.nrows() {
        let mut distinct: Vec<f64> = samples.iter().map(|&s| values[[f, s]]).collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        for w in distinct.windows(2) {
            let t = w[0] + (w[1] - w[0]) / 2.0;
            let left = count(&mut samples.iter().copied().filter(|&s| values[[f, s]] <= t));
            let right = count(&mut samples.iter().copied().filter(|&s| values[[f, s]] > t));
            let nl: usize = left.iter().sum();
            let nr: usize = right.iter().sum();
            let delta = gini_of(&parent) - (nl as f64 / n) * gini_of(&left) - (nr as f64 / n) * gini_of(&right);
            if delta > 0.0 && best.is_none_or(|b| delta > b.2) {
                best = Some((f, t, delta));
            }
        }
    }
    best
}

/// Model whose single affine layer is `w`.
pub fn affine_model(w: Array2<f64>) -> MlpModel {
    let (out, inp) = w.dim();
    MlpModel {
        format_version: 1,
        config: MlpConfig {
            input_dim: inp,
            hidden: vec![],
            output_dim: out,
            epochs: 0,
            batch_size: 1,
            adam: AdamHyper::default(),
            seed: 0,
        },
        class_names: (0..out).map(|k| format!("c{k}")).collect(),
        layers: vec![Layer {
            weights: w,
            bias: Array1::zeros(out),
            activation: Activation::Softmax,
            dropout: 0.0,
        }],
    }
}
