//! Normalization, scaling and filtering of expression matrices, plus the
//! label-side transforms: tissue grouping, age binning, class filtering and
//! class-balancing by downsampling.

use std::collections::HashMap;

use ndarray::Axis;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AnnotatedDataset, ExpressionMatrix, MetadataTable};
use crate::rng;

/// Scales every sample column to a library size of one million.
pub fn rpm_normalize(matrix: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    let mut out = matrix.clone();
    for (s, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
        let total: f64 = col.sum();
        if !(total > 0.0) {
            return Err(Error::data(format!(
                "sample {:?} has zero total count",
                matrix.sample_ids[s]
            )));
        }
        col.mapv_inplace(|v| v * 1e6 / total);
    }
    Ok(out)
}

/// Per-feature range learned by [`fit_minmax`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub feature_ids: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_minmax(matrix: &ExpressionMatrix) -> ScalerParams {
    let (min, max) = matrix
        .values
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .map(|(lo, hi)| if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) })
        .unzip();
    ScalerParams {
        feature_ids: matrix.feature_ids.clone(),
        min,
        max,
    }
}

/// Maps each feature onto `[0, 1]` using fitted ranges. Values outside the
/// fitted range are clamped; constant features map to 0.
pub fn apply_minmax(matrix: &ExpressionMatrix, params: &ScalerParams) -> Result<ExpressionMatrix> {
    if matrix.feature_ids != params.feature_ids {
        return Err(Error::data("scaler was fitted on a different feature set"));
    }
    let mut out = matrix.clone();
    for ((mut row, &lo), &hi) in out.values.rows_mut().into_iter().zip(&params.min).zip(&params.max) {
        let span = hi - lo;
        if span > 0.0 {
            row.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
        } else {
            row.fill(0.0);
        }
    }
    Ok(out)
}

/// Drops features whose zero fraction is strictly greater than `threshold`.
pub fn filter_zero_features(matrix: &ExpressionMatrix, threshold: f64) -> Result<ExpressionMatrix> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("zero threshold {threshold} outside [0, 1]")));
    }
    let n = matrix.n_samples() as f64;
    let keep: Vec<usize> = matrix
        .values
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| (r.iter().filter(|&&v| v == 0.0).count() as f64) / n <= threshold)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::data(format!("every feature has more than {threshold} zeros")));
    }
    Ok(matrix.select_features(&keep))
}

/// Tissue → tissue group mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueGroupMap {
    map: HashMap<String, String>,
}

/// Built-in tissue groups and their member tissues.
pub const TISSUE_GROUPS: &[(&str, &[&str])] = &[
    (
        "blood_group",
        &[
            "blood",
            "blood plasma",
            "blood serum",
            "peripheral blood",
            "umbilical cord blood",
            "serum",
            "buffy coat",
            "immortal human B cell",
            "liver",
            "lymphoblastoid cell",
        ],
    ),
    (
        "brain_group",
        &["brain", "cingulate gyrus", "motor cortex", "prefrontal cortex", "neocortex"],
    ),
    (
        "epithelium_group",
        &["skin", "dermis", "epidermis", "breast", "oral mucosa", "larynx"],
    ),
    (
        "gland_group",
        &[
            "prostate gland",
            "testis",
            "kidney",
            "bladder",
            "uterine endometrium",
            "tonsil",
            "lymph node",
        ],
    ),
    ("intestine_group", &["intestine", "colon", "ileal mucosa"]),
];

impl TissueGroupMap {
    pub fn builtin() -> Self {
        let map = TISSUE_GROUPS
            .iter()
            .flat_map(|(g, members)| members.iter().map(move |m| (m.to_string(), g.to_string())))
            .collect();
        Self { map }
    }

    pub fn group_of(&self, tissue: &str) -> Option<&str> {
        self.map.get(tissue).map(String::as_str)
    }
}

impl Default for TissueGroupMap {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Replaces mapped tissues by their group; unmapped tissues pass through.
pub fn group_tissues(meta: &MetadataTable, map: &TissueGroupMap) -> MetadataTable {
    let mut out = meta.clone();
    for row in &mut out.rows {
        if let Some(t) = &row.tissue {
            if let Some(g) = map.group_of(t) {
                row.tissue = Some(g.to_owned());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeInterval {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
}

/// Contiguous age intervals. The first interval is closed on both ends,
/// every later one is open below and closed above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBinning {
    pub intervals: Vec<AgeInterval>,
}

pub const MAX_AGE: f64 = 110.0;

impl AgeBinning {
    /// One of the preloaded schemes with `k ∈ {2, 3, 4}` intervals.
    pub fn scheme(k: usize) -> Result<Self> {
        let spec: &[(&str, f64, f64)] = match k {
            2 => &[("[0;65]", 0.0, 65.0), ("(65;110]", 65.0, 110.0)],
            3 => &[("[0;45]", 0.0, 45.0), ("(45;70]", 45.0, 70.0), ("(70,110]", 70.0, 110.0)],
            4 => &[
                ("[0;30]", 0.0, 30.0),
                ("(30;60]", 30.0, 60.0),
                ("(60,80]", 60.0, 80.0),
                ("(80,110]", 80.0, 110.0),
            ],
            _ => return Err(Error::config(format!("no age scheme with {k} intervals (use 2, 3 or 4)"))),
        };
        Ok(Self {
            intervals: spec
                .iter()
                .map(|&(label, lower, upper)| AgeInterval {
                    label: label.to_owned(),
                    lower,
                    upper,
                })
                .collect(),
        })
    }

    pub fn bin(&self, age: f64) -> Result<&str> {
        if !(0.0..=MAX_AGE).contains(&age) {
            return Err(Error::data(format!("age {age} outside [0, {MAX_AGE}]")));
        }
        self.intervals
            .iter()
            .enumerate()
            .find(|(i, iv)| {
                let above = if *i == 0 { age >= iv.lower } else { age > iv.lower };
                above && age <= iv.upper
            })
            .map(|(_, iv)| iv.label.as_str())
            .ok_or_else(|| Error::data(format!("age {age} not covered by any interval")))
    }
}

pub fn bin_age(age: f64, scheme: &AgeBinning) -> Result<&str> {
    scheme.bin(age)
}

fn reencode(data: &AnnotatedDataset, keep_classes: &[usize]) -> AnnotatedDataset {
    let mut remap = vec![usize::MAX; data.n_classes()];
    for (new, &old) in keep_classes.iter().enumerate() {
        remap[old] = new;
    }
    let idx: Vec<usize> = (0..data.n_samples())
        .filter(|&i| remap[data.labels[i]] != usize::MAX)
        .collect();
    let mut out = data.subset(&idx);
    out.labels = out.labels.iter().map(|&y| remap[y]).collect();
    out.class_names = keep_classes.iter().map(|&c| data.class_names[c].clone()).collect();
    out
}

/// Removes classes with fewer than `min_samples` samples and re-encodes.
pub fn filter_small_classes(data: &AnnotatedDataset, min_samples: usize) -> Result<AnnotatedDataset> {
    if min_samples == 0 {
        return Err(Error::config("min class size must be at least 1"));
    }
    let keep: Vec<usize> = data
        .class_counts()
        .iter()
        .enumerate()
        .filter(|(_, &n)| n >= min_samples)
        .map(|(c, _)| c)
        .collect();
    if keep.len() < 2 {
        return Err(Error::data(format!(
            "only {} class(es) with at least {min_samples} samples",
            keep.len()
        )));
    }
    Ok(reencode(data, &keep))
}

/// Subsamples every class to the size of the smallest one.
pub fn downsample_classes(data: &AnnotatedDataset, seed: u64) -> AnnotatedDataset {
    let counts = data.class_counts();
    let target = counts.iter().copied().filter(|&n| n > 0).min().unwrap_or(0);
    let mut rng = rng::substream(seed, rng::DOWNSAMPLE, 0);
    let mut keep = Vec::with_capacity(target * counts.len());
    for class in 0..data.n_classes() {
        let members: Vec<usize> = (0..data.n_samples()).filter(|&i| data.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        keep.extend(index::sample(&mut rng, members.len(), target).into_iter().map(|i| members[i]));
    }
    keep.sort_unstable();
    data.subset(&keep)
}

/// Matrix-side preprocessing steps, applied in the order RPM → MinMax → zero filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixPipeline {
    pub rpm: bool,
    pub minmax: bool,
    pub zero_threshold: Option<f64>,
}

impl Default for MatrixPipeline {
    fn default() -> Self {
        Self {
            rpm: true,
            minmax: true,
            zero_threshold: Some(0.3),
        }
    }
}

impl MatrixPipeline {
    pub fn apply(&self, matrix: &ExpressionMatrix) -> Result<(ExpressionMatrix, Option<ScalerParams>)> {
        let mut m = if self.rpm { rpm_normalize(matrix)? } else { matrix.clone() };
        let mut params = None;
        if self.minmax {
            let p = fit_minmax(&m);
            m = apply_minmax(&m, &p)?;
            params = Some(p);
        }
        if let Some(t) = self.zero_threshold {
            m = filter_zero_features(&m, t)?;
        }
        Ok((m, params))
    }
}
