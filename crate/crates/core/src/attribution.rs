//! DeepLIFT contribution scores for [`MlpModel`] and the explanations built
//! on them: class-average scores, per-sample score differences and the
//! feature-knockout stability/similarity analysis.
//!
//! Scores are taken on the logits. Affine layers use the Linear rule and ReLU
//! units the Rescale rule, so for every sample and class the contributions
//! sum to `logit(x) − logit(reference)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mlp::{argmax, MlpModel};

/// |Δz| below which the Rescale multiplier falls back to the ReLU slope at the reference.
pub const RESCALE_EPS: f64 = 1e-7;

/// `C[i][j][k]`: contribution of input `j` to logit `k` for sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTensor {
    /// Shape `(samples, inputs, classes)`.
    pub scores: Array3<f64>,
    pub reference: Array1<f64>,
    pub model_fingerprint: String,
}

impl ContributionTensor {
    /// Scores of one sample, `inputs × classes`.
    pub fn sample(&self, i: usize) -> ArrayView2<'_, f64> {
        self.scores.index_axis(Axis(0), i)
    }

    pub fn n_samples(&self) -> usize {
        self.scores.dim().0
    }

    pub fn n_features(&self) -> usize {
        self.scores.dim().1
    }

    pub fn n_classes(&self) -> usize {
        self.scores.dim().2
    }
}

/// FNV-1a over the bit patterns of every parameter.
pub fn model_fingerprint(model: &MlpModel) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for l in &model.layers {
        eat(l.weights.nrows() as u64);
        eat(l.weights.ncols() as u64);
        l.weights.iter().chain(l.bias.iter()).for_each(|v| eat(v.to_bits()));
    }
    format!("{h:016x}")
}

/// Per-layer pre-activations for one input, inference mode.
fn pre_activations(model: &MlpModel, x: ArrayView1<f64>) -> Vec<Array1<f64>> {
    let mut out = Vec::with_capacity(model.layers.len());
    let mut a = x.to_owned();
    for (l, layer) in model.layers.iter().enumerate() {
        let z = layer.weights.dot(&a) + &layer.bias;
        if l + 1 < model.layers.len() {
            a = z.mapv(|v| v.max(0.0));
        }
        out.push(z);
    }
    out
}

/// `classes × inputs` multipliers of one sample against the reference.
fn multipliers(model: &MlpModel, z: &[Array1<f64>], z_ref: &[Array1<f64>]) -> Result<Array2<f64>> {
    let last = model.layers.len() - 1;
    let mut m = model.layers[last].weights.clone();
    for l in (0..last).rev() {
        let slope: Array1<f64> = z[l]
            .iter()
            .zip(z_ref[l].iter())
            .map(|(&zx, &zr)| {
                let dz = zx - zr;
                if dz.abs() < RESCALE_EPS {
                    if zr > 0.0 { 1.0 } else { 0.0 }
                } else {
                    (zx.max(0.0) - zr.max(0.0)) / dz
                }
            })
            .collect();
        m *= &slope;
        m = m.dot(&model.layers[l].weights);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite DeepLIFT multiplier".into()));
    }
    Ok(m)
}

/// DeepLIFT (Rescale) scores of `samples` (`samples × inputs`) against
/// `reference` (zero vector when `None`).
pub fn deeplift_scores(
    model: &MlpModel,
    samples: ArrayView2<f64>,
    reference: Option<ArrayView1<f64>>,
) -> Result<ContributionTensor> {
    let d = model.input_dim();
    if samples.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: samples.ncols(),
        });
    }
    let reference = reference.map_or_else(|| Array1::zeros(d), |r| r.to_owned());
    if reference.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: reference.len(),
        });
    }
    let z_ref = pre_activations(model, reference.view());
    let per_sample: Vec<Array2<f64>> = (0..samples.nrows())
        .into_par_iter()
        .map(|i| {
            let x = samples.row(i);
            let z = pre_activations(model, x);
            let m = multipliers(model, &z, &z_ref)?;
            let dx = &x - &reference;
            // inputs × classes
            Ok((m * &dx).reversed_axes())
        })
        .collect::<Result<_>>()?;
    let k = model.output_dim();
    let mut scores = Array3::zeros((samples.nrows(), d, k));
    for (i, c) in per_sample.into_iter().enumerate() {
        scores.index_axis_mut(Axis(0), i).assign(&c);
    }
    Ok(ContributionTensor {
        scores,
        reference,
        model_fingerprint: model_fingerprint(model),
    })
}

/// `D1[j][k]`: mean over samples of class `k` of own-class score minus the
/// mean score over the other classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoreTable {
    /// `features × classes`.
    pub d1: Array2<f64>,
}

pub fn class_average_scores(c: &ContributionTensor, labels: &[usize]) -> Result<ClassScoreTable> {
    let (n, d, k) = c.scores.dim();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if k < 2 {
        return Err(Error::data("class scores need at least two classes"));
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(Error::data(format!("label {y} out of range for {k} classes")));
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!("class {empty} has no samples")));
    }
    let mut d1 = Array2::zeros((d, k));
    for (i, &y) in labels.iter().enumerate() {
        let ci = c.sample(i);
        for j in 0..d {
            let row = ci.row(j);
            let others = (row.sum() - row[y]) / (k - 1) as f64;
            d1[[j, y]] += row[y] - others;
        }
    }
    for (mut col, &n) in d1.columns_mut().into_iter().zip(&counts) {
        col /= n as f64;
    }
    Ok(ClassScoreTable { d1 })
}

/// Feature indices sorted by `D1[·][class]` descending (ties to the lower index),
/// truncated to `n`.
pub fn top_n_features(table: &ClassScoreTable, class: usize, n: usize) -> Vec<usize> {
    let col = table.d1.column(class);
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// `D2[j] = C[i][j][own] − C[i][j][target]`.
pub fn score_differences(c: &ContributionTensor, i: usize, own: usize, target: usize) -> Result<Array1<f64>> {
    if own == target {
        return Err(Error::data("target class must differ from the sample's class"));
    }
    let ci = c.sample(i);
    Ok(&ci.column(own) - &ci.column(target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnockoutMode {
    /// Stop when the prediction becomes this class.
    Similarity(usize),
    /// Stop when the prediction becomes any other class.
    Stability,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnockoutResult {
    /// Class predicted for the untouched sample.
    pub original: usize,
    /// Class whose D2 ordering was followed.
    pub target: usize,
    /// Features in removal order (only those actually zeroed).
    pub removed: Vec<usize>,
    pub steps: usize,
    pub flipped: bool,
    /// Prediction after the last removal.
    pub new_class: usize,
}

/// Second-highest logit, ties to the lower index.
fn runner_up(logits: ArrayView1<f64>, top: usize) -> usize {
    argmax(logits.iter().enumerate().map(|(i, &v)| if i == top { f64::NEG_INFINITY } else { v }))
}

/// Descending order of `d2`, ties to the lower index.
pub fn removal_order(d2: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d2.len()).collect();
    idx.sort_by(|&a, &b| d2[b].total_cmp(&d2[a]).then(a.cmp(&b)));
    idx
}

/// Zeroes features of `x` one at a time in descending D2 order until the
/// prediction flips, or until `max_steps` features are gone.
pub fn knockout(model: &MlpModel, x: ArrayView1<f64>, mode: KnockoutMode, max_steps: Option<usize>) -> Result<KnockoutResult> {
    let d = model.input_dim();
    let max_steps = max_steps.unwrap_or(d).min(d);
    let x2 = x.insert_axis(Axis(0));
    let logits = model.logits(x2)?;
    let original = argmax(logits.row(0).iter().copied());
    let target = match mode {
        KnockoutMode::Similarity(t) => {
            if t >= model.output_dim() {
                return Err(Error::data(format!("target class {t} out of range")));
            }
            t
        }
        KnockoutMode::Stability => runner_up(logits.row(0), original),
    };
    if target == original {
        return Ok(KnockoutResult {
            original,
            target,
            removed: Vec::new(),
            steps: 0,
            flipped: true,
            new_class: original,
        });
    }
    let c = deeplift_scores(model, x2, None)?;
    let d2 = score_differences(&c, 0, original, target)?;
    let order = removal_order(d2.view());
    let stop = |class: usize| match mode {
        KnockoutMode::Similarity(t) => class == t,
        KnockoutMode::Stability => class != original,
    };

    let mut current = x.to_owned();
    let mut done = 0;
    let mut new_class = original;
    let mut chunk = 8;
    while done < max_steps {
        let len = chunk.min(max_steps - done);
        // Row r holds the input after removing order[..done + r + 1].
        let mut batch = Array2::zeros((len, d));
        for r in 0..len {
            current[order[done + r]] = 0.0;
            batch.row_mut(r).assign(&current);
        }
        let out = model.logits(batch.view())?;
        for r in 0..len {
            new_class = argmax(out.row(r).iter().copied());
            if stop(new_class) {
                let steps = done + r + 1;
                return Ok(KnockoutResult {
                    original,
                    target,
                    removed: order[..steps].to_vec(),
                    steps,
                    flipped: true,
                    new_class,
                });
            }
        }
        done += len;
        chunk = (chunk * 2).min(256);
    }
    Ok(KnockoutResult {
        original,
        target,
        removed: order[..max_steps].to_vec(),
        steps: max_steps,
        flipped: false,
        new_class,
    })
}

/// Mean knockout step counts per class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// `similarity[k][k']`: mean steps for class-`k` samples to turn into `k'`;
    /// `None` on the diagonal and for classes without usable samples.
    pub similarity: Vec<Vec<Option<f64>>>,
    /// Mean steps for class-`k` samples to turn into any other class.
    pub stability: Vec<Option<f64>>,
    /// Correctly predicted samples used per class.
    pub samples_used: Vec<usize>,
    /// Knockouts that hit the step cap without flipping.
    pub no_flip: usize,
    /// Classes without a correctly predicted sample.
    pub missing: Vec<usize>,
    pub max_steps: usize,
}

/// Runs similarity knockouts towards every other class and a stability
/// knockout for every correctly predicted sample. Samples that never flip
/// count as `max_steps`.
pub fn stability_matrix(
    model: &MlpModel,
    samples: ArrayView2<f64>,
    labels: &[usize],
    max_steps: Option<usize>,
) -> Result<StabilityReport> {
    if samples.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: samples.nrows(),
            got: labels.len(),
        });
    }
    let k = model.output_dim();
    let cap = max_steps.unwrap_or(model.input_dim()).min(model.input_dim());
    let predicted = model.predict(samples)?.labels;
    let used: Vec<usize> = (0..labels.len()).filter(|&i| predicted[i] == labels[i]).collect();

    // Per sample: steps towards each class (own class unused) and the stability steps.
    let runs: Vec<(usize, Vec<KnockoutResult>, KnockoutResult)> = used
        .par_iter()
        .map(|&i| {
            let x = samples.row(i);
            let y = labels[i];
            let sims = (0..k)
                .filter(|&t| t != y)
                .map(|t| knockout(model, x, KnockoutMode::Similarity(t), Some(cap)))
                .collect::<Result<Vec<_>>>()?;
            let stab = knockout(model, x, KnockoutMode::Stability, Some(cap))?;
            Ok((y, sims, stab))
        })
        .collect::<Result<_>>()?;

    let mut sim_sum = vec![vec![0.0; k]; k];
    let mut stab_sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    let mut no_flip = 0;
    for (y, sims, stab) in &runs {
        count[*y] += 1;
        for r in sims {
            sim_sum[*y][r.target] += r.steps as f64;
            no_flip += usize::from(!r.flipped);
        }
        stab_sum[*y] += stab.steps as f64;
        no_flip += usize::from(!stab.flipped);
    }
    let similarity = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| (a != b && count[a] > 0).then(|| sim_sum[a][b] / count[a] as f64))
                .collect()
        })
        .collect();
    let stability = (0..k)
        .map(|a| (count[a] > 0).then(|| stab_sum[a] / count[a] as f64))
        .collect();
    let missing = (0..k).filter(|&a| count[a] == 0).collect();
    Ok(StabilityReport {
        similarity,
        stability,
        samples_used: count,
        no_flip,
        missing,
        max_steps: cap,
    })
}

/// Writes a labeled score grid as TSV and, optionally, as an SVG heatmap
/// with a blue–white–red palette centered at zero.
pub fn emit_heatmap(
    scores: ArrayView2<f64>,
    row_labels: &[String],
    col_labels: &[String],
    tsv_path: &Path,
    svg_path: Option<&Path>,
) -> Result<()> {
    if scores.nrows() == 0 || scores.ncols() == 0 {
        return Err(Error::data("heatmap needs at least one row and one column"));
    }
    if row_labels.len() != scores.nrows() {
        return Err(Error::Dimension {
            expected: scores.nrows(),
            got: row_labels.len(),
        });
    }
    if col_labels.len() != scores.ncols() {
        return Err(Error::Dimension {
            expected: scores.ncols(),
            got: col_labels.len(),
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("heatmap scores must be finite".into()));
    }
    fs::write(tsv_path, score_tsv(scores, row_labels, col_labels)).map_err(|e| Error::io(tsv_path, e))?;
    if let Some(p) = svg_path {
        fs::write(p, heatmap_svg(scores, row_labels, col_labels)).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn score_tsv(scores: ArrayView2<f64>, row_labels: &[String], col_labels: &[String]) -> String {
    let mut out = String::from("feature_id");
    for c in col_labels {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (label, row) in row_labels.iter().zip(scores.rows()) {
        out.push_str(label);
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

fn diverging(v: f64, scale: f64) -> String {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(t), fade(t), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const CELL_W: usize = 60;
const CELL_H: usize = 14;
const LEFT: usize = 220;
const TOP: usize = 60;

pub fn heatmap_svg(scores: ArrayView2<f64>, row_labels: &[String], col_labels: &[String]) -> String {
    let (rows, cols) = scores.dim();
    let scale = scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let width = LEFT + cols * CELL_W + 10;
    let height = TOP + rows * CELL_H + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    for (c, label) in col_labels.iter().enumerate() {
        let x = LEFT + c * CELL_W + CELL_W / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="end" transform="rotate(-45 {x} {})">{}</text>"#,
            TOP - 4,
            TOP - 4,
            escape(label)
        );
    }
    for (r, label) in row_labels.iter().enumerate() {
        let y = TOP + r * CELL_H;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 4,
            y + CELL_H - 3,
            escape(label)
        );
        for c in 0..cols {
            let v = scores[[r, c]];
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}"><title>{v}</title></rect>"#,
                LEFT + c * CELL_W,
                diverging(v, scale)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Rows of `scores` for the listed feature indices.
pub fn select_rows(scores: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), scores.ncols()));
    for (o, &r) in rows.iter().enumerate() {
        out.slice_mut(s![o, ..]).assign(&scores.row(r));
    }
    out
}
