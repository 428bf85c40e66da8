//! K-fold cross-validation, one-dataset-out evaluation, classification
//! metrics and the synthetic cohort generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AnnotatedDataset, ExpressionMatrix, LabelField, MetadataRow};
use crate::mlp::{self, HiddenLayer, MlpConfig};
use crate::preprocess::{apply_minmax, fit_minmax};
use crate::rf::{two_stage_fit, TwoStageConfig};
use crate::rng;

/// Sample ids per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

/// Seeded permutation dealt round-robin into `k` folds.
pub fn kfold_split(sample_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > sample_ids.len() {
        return Err(Error::config(format!("cannot split {} samples into {k} folds", sample_ids.len())));
    }
    let mut perm: Vec<usize> = (0..sample_ids.len()).collect();
    perm.shuffle(&mut rng::substream(seed, rng::FOLDS, 0));
    let mut folds = vec![Vec::new(); k];
    for (i, &p) in perm.iter().enumerate() {
        folds[i % k].push(sample_ids[p].clone());
    }
    Ok(FoldPlan { k, folds, seed })
}

/// Indices of training/test samples for every fold.
fn fold_indices(data: &AnnotatedDataset, plan: &FoldPlan) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut fold_of = BTreeMap::new();
    for (f, ids) in plan.folds.iter().enumerate() {
        for id in ids {
            if fold_of.insert(id.as_str(), f).is_some() {
                return Err(Error::data(format!("sample {id:?} appears in more than one fold")));
            }
        }
    }
    let mut out = vec![(Vec::new(), Vec::new()); plan.folds.len()];
    for (i, sid) in data.matrix.sample_ids.iter().enumerate() {
        let f = *fold_of
            .get(sid.as_str())
            .ok_or_else(|| Error::data(format!("sample {sid:?} is in no fold")))?;
        for (g, (train, test)) in out.iter_mut().enumerate() {
            if g == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
    }
    if fold_of.len() != data.n_samples() {
        return Err(Error::data("fold plan names samples that are not in the dataset"));
    }
    Ok(out)
}

fn missing_classes(data: &AnnotatedDataset, idx: &[usize]) -> Vec<usize> {
    let present: BTreeSet<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    (0..data.n_classes()).filter(|c| !present.contains(c)).collect()
}

pub const MAX_PLAN_ATTEMPTS: u64 = 20;

/// A fold plan whose every training portion contains every class, retrying
/// with derived seeds up to [`MAX_PLAN_ATTEMPTS`] times.
pub fn plan_with_class_coverage(data: &AnnotatedDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    for attempt in 0..MAX_PLAN_ATTEMPTS {
        let s = if attempt == 0 { seed } else { rng::derive_seed(seed, "replan", attempt) };
        let plan = kfold_split(&data.matrix.sample_ids, k, s)?;
        let ok = fold_indices(data, &plan)?
            .iter()
            .all(|(train, _)| missing_classes(data, train).is_empty());
        if ok {
            return Ok(plan);
        }
    }
    Err(Error::data(format!(
        "no {k}-fold plan with every class in every training portion after {MAX_PLAN_ATTEMPTS} attempts"
    )))
}

/// Something that can be trained on one dataset and label another.
pub trait Learner: Sync {
    fn name(&self) -> &str;

    /// Trains on `train` and returns class indices (in `train.class_names`
    /// encoding) for the samples of `test`.
    fn fit_predict(&self, train: &AnnotatedDataset, test: &ExpressionMatrix, seed: u64) -> Result<Vec<usize>>;
}

/// The neural classifier. Input/output widths are taken from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLearner {
    pub hidden: Vec<HiddenLayer>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: mlp::AdamHyper,
}

impl Default for MlpLearner {
    fn default() -> Self {
        let c = MlpConfig::new(1, 1);
        Self {
            hidden: c.hidden,
            epochs: c.epochs,
            batch_size: c.batch_size,
            adam: c.adam,
        }
    }
}

impl MlpLearner {
    pub fn config_for(&self, data: &AnnotatedDataset, seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: data.n_features(),
            hidden: self.hidden.clone(),
            output_dim: data.n_classes(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            seed,
        }
    }
}

impl Learner for MlpLearner {
    fn name(&self) -> &str {
        "mlp"
    }

    fn fit_predict(&self, train: &AnnotatedDataset, test: &ExpressionMatrix, seed: u64) -> Result<Vec<usize>> {
        let model = mlp::train(train, &self.config_for(train, seed))?.model;
        Ok(model.predict(test.sample_major().view())?.labels)
    }
}

/// The two-stage random forest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RfLearner {
    pub config: TwoStageConfig,
}

impl Learner for RfLearner {
    fn name(&self) -> &str {
        "rf"
    }

    fn fit_predict(&self, train: &AnnotatedDataset, test: &ExpressionMatrix, seed: u64) -> Result<Vec<usize>> {
        let fitted = two_stage_fit(train, &self.config, seed)?;
        Ok(fitted.forest.predict_matrix(test)?.labels)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Fit the MinMax scaler on each training portion only and apply it
    /// (clamped) to the held-out samples.
    pub fold_safe_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `None` where the class was never predicted.
    pub precision: Vec<Option<f64>>,
    /// `None` where the class has no true samples.
    pub recall: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub fold_accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn mean_fold_accuracy(&self) -> Option<f64> {
        (!self.fold_accuracies.is_empty())
            .then(|| self.fold_accuracies.iter().sum::<f64>() / self.fold_accuracies.len() as f64)
    }

    /// Mean recall over classes with true samples.
    pub fn mean_class_recall(&self) -> Option<f64> {
        let r: Vec<f64> = self.recall.iter().flatten().copied().collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn confusion_tsv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.class_names {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
        for (c, row) in self.class_names.iter().zip(&self.confusion) {
            s.push_str(c);
            for n in row {
                let _ = write!(s, "\t{n}");
            }
            s.push('\n');
        }
        s
    }

    pub fn per_class_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("class\tsupport\tprecision\trecall\n");
        for (c, name) in self.class_names.iter().enumerate() {
            let support: usize = self.confusion[c].iter().sum();
            let _ = writeln!(s, "{name}\t{support}\t{}\t{}", opt(self.precision[c]), opt(self.recall[c]));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("accuracy\t{}\ncorrect\t{}\ntotal\t{}\n", self.accuracy, self.correct, self.total);
        if let Some(m) = self.mean_fold_accuracy() {
            let _ = writeln!(s, "mean_fold_accuracy\t{m}");
            for (f, a) in self.fold_accuracies.iter().enumerate() {
                let _ = writeln!(s, "fold_{f}_accuracy\t{a}");
            }
        }
        if let Some(r) = self.mean_class_recall() {
            let _ = writeln!(s, "mean_class_recall\t{r}");
        }
        s
    }
}

/// Accuracy, per-class precision/recall and confusion counts.
pub fn metrics(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<EvalReport> {
    if truth.len() != predicted.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let k = class_names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::data(format!("label {} outside {k} classes", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let total = truth.len();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = (0..k)
        .map(|c| ratio(confusion[c][c], (0..k).map(|t| confusion[t][c]).sum()))
        .collect();
    let recall = (0..k).map(|c| ratio(confusion[c][c], confusion[c].iter().sum())).collect();
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        total,
        correct,
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        precision,
        recall,
        confusion,
        fold_accuracies: Vec::new(),
    })
}

/// What one evaluation split looked like, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldDetail {
    pub test_ids: Vec<String>,
    pub train_ids: Vec<String>,
    /// Samples the fold's scaler was fitted on (fold-safe scaling only).
    pub scaler_fit_ids: Option<Vec<String>>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub folds: Vec<FoldDetail>,
}

fn run_split(
    learner: &dyn Learner,
    data: &AnnotatedDataset,
    train_idx: &[usize],
    test_idx: &[usize],
    options: EvalOptions,
    seed: u64,
) -> Result<(Vec<usize>, FoldDetail)> {
    let mut train = data.subset(train_idx);
    let mut test = data.matrix.select_samples(test_idx);
    let mut scaler_fit_ids = None;
    if options.fold_safe_scaling {
        let params = fit_minmax(&train.matrix);
        scaler_fit_ids = Some(train.matrix.sample_ids.clone());
        train = train.with_matrix(apply_minmax(&train.matrix, &params)?)?;
        test = apply_minmax(&test, &params)?;
    }
    let predicted = learner.fit_predict(&train, &test, seed)?;
    if predicted.len() != test_idx.len() {
        return Err(Error::Dimension {
            expected: test_idx.len(),
            got: predicted.len(),
        });
    }
    let correct = test_idx
        .iter()
        .zip(&predicted)
        .filter(|(&i, &p)| data.labels[i] == p)
        .count();
    let detail = FoldDetail {
        test_ids: test.sample_ids.clone(),
        train_ids: train.matrix.sample_ids.clone(),
        scaler_fit_ids,
        accuracy: correct as f64 / test_idx.len().max(1) as f64,
    };
    Ok((predicted, detail))
}

/// Trains on all but one fold and predicts the held-out fold, for every
/// fold. Predictions are pooled into one report; per-fold accuracies are kept.
pub fn cross_validate(
    learner: &dyn Learner,
    data: &AnnotatedDataset,
    plan: &FoldPlan,
    options: EvalOptions,
    seed: u64,
) -> Result<EvalOutcome> {
    let splits = fold_indices(data, plan)?;
    for (f, (train, _)) in splits.iter().enumerate() {
        let miss = missing_classes(data, train);
        if !miss.is_empty() {
            let names: Vec<&str> = miss.iter().map(|&c| data.class_names[c].as_str()).collect();
            return Err(Error::data(format!("training portion of fold {f} lacks classes {names:?}")));
        }
    }
    let mut truth = Vec::with_capacity(data.n_samples());
    let mut pred = Vec::with_capacity(data.n_samples());
    let mut folds = Vec::with_capacity(splits.len());
    for (f, (train, test)) in splits.iter().enumerate() {
        log::info!("{}: fold {}/{}", learner.name(), f + 1, splits.len());
        let (p, detail) = run_split(learner, data, train, test, options, rng::derive_seed(seed, "fold", f as u64))?;
        truth.extend(test.iter().map(|&i| data.labels[i]));
        pred.extend(p);
        folds.push(detail);
    }
    let mut report = metrics(&truth, &pred, &data.class_names)?;
    report.fold_accuracies = folds.iter().map(|d| d.accuracy).collect();
    Ok(EvalOutcome { report, folds })
}

/// Trains on every dataset except `held_out` and evaluates on `held_out`.
pub fn one_dataset_out(
    learner: &dyn Learner,
    data: &AnnotatedDataset,
    held_out: &str,
    options: EvalOptions,
    seed: u64,
) -> Result<EvalOutcome> {
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..data.n_samples()).partition(|&i| data.metadata[i].dataset_id == held_out);
    if test.is_empty() {
        return Err(Error::data(format!("no samples from dataset {held_out:?}")));
    }
    let in_test: BTreeSet<usize> = test.iter().map(|&i| data.labels[i]).collect();
    let in_train: BTreeSet<usize> = train.iter().map(|&i| data.labels[i]).collect();
    let orphans: Vec<&str> = in_test
        .difference(&in_train)
        .map(|&c| data.class_names[c].as_str())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::data(format!(
            "dataset {held_out:?} is the only source of classes {orphans:?}"
        )));
    }
    if in_train.len() < 2 {
        return Err(Error::data("training portion has fewer than two classes"));
    }
    // Train on the classes that remain; labels keep the global encoding.
    let (pred, detail) = run_split(learner, data, &train, &test, options, rng::derive_seed(seed, "odo", 0))?;
    let truth: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    let mut report = metrics(&truth, &pred, &data.class_names)?;
    report.fold_accuracies = vec![detail.accuracy];
    Ok(EvalOutcome {
        report,
        folds: vec![detail],
    })
}

/// One-dataset-out over every dataset that satisfies the precondition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdoSweep {
    pub per_dataset: Vec<(String, EvalReport)>,
    /// Datasets skipped because they were the only source of some class.
    pub skipped: Vec<String>,
    /// All held-out predictions pooled.
    pub pooled: EvalReport,
}

impl OdoSweep {
    /// Mean of per-dataset accuracies.
    pub fn mean_dataset_accuracy(&self) -> f64 {
        self.per_dataset.iter().map(|(_, r)| r.accuracy).sum::<f64>() / self.per_dataset.len().max(1) as f64
    }

    /// Mean of per-class recalls of the pooled predictions.
    pub fn mean_class_recall(&self) -> Option<f64> {
        self.pooled.mean_class_recall()
    }
}

pub fn one_dataset_out_all(
    learner: &dyn Learner,
    data: &AnnotatedDataset,
    options: EvalOptions,
    seed: u64,
) -> Result<OdoSweep> {
    let ids: BTreeSet<&str> = data.metadata.iter().map(|m| m.dataset_id.as_str()).collect();
    let mut per_dataset = Vec::new();
    let mut skipped = Vec::new();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for id in ids {
        match one_dataset_out(learner, data, id, options, rng::derive_seed(seed, id, 0)) {
            Ok(out) => {
                for (t, row) in out.report.confusion.iter().enumerate() {
                    for (p, &n) in row.iter().enumerate() {
                        truth.extend(std::iter::repeat_n(t, n));
                        pred.extend(std::iter::repeat_n(p, n));
                    }
                }
                per_dataset.push((id.to_owned(), out.report));
            }
            Err(Error::Data(msg)) if msg.contains("only source") => {
                log::warn!("skipping dataset {id}: {msg}");
                skipped.push(id.to_owned());
            }
            Err(e) => return Err(e),
        }
    }
    if per_dataset.is_empty() {
        return Err(Error::data("no dataset can be held out"));
    }
    let mut pooled = metrics(&truth, &pred, &data.class_names)?;
    pooled.fold_accuracies = per_dataset.iter().map(|(_, r)| r.accuracy).collect();
    Ok(OdoSweep {
        per_dataset,
        skipped,
        pooled,
    })
}

/// Parameters of the synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_features: usize,
    /// Informative features per class; class `c` owns the block
    /// `[c·n, (c+1)·n)`.
    pub n_informative: usize,
    pub samples_per_class: usize,
    pub shift: f64,
    pub noise_scale: f64,
    pub n_datasets: usize,
    /// Log-scale standard deviation of the per-dataset, per-feature
    /// multiplicative bias (0 disables it).
    pub dataset_bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_features: 2000,
            n_informative: 20,
            samples_per_class: 60,
            shift: 5.0,
            noise_scale: 1.0,
            n_datasets: 1,
            dataset_bias: 0.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn informative_features(&self) -> Vec<usize> {
        (0..self.n_classes * self.n_informative).collect()
    }

    pub fn class_name(c: usize) -> String {
        format!("class{c:02}")
    }
}

/// Absolute-Gaussian noise plus a class-specific shift on the class's own
/// feature block, multiplied by a per-dataset bias. Samples are dealt to
/// datasets round-robin; the class name is stored as the tissue.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<AnnotatedDataset> {
    if cfg.n_classes < 2 || cfg.samples_per_class == 0 || cfg.n_datasets == 0 || cfg.n_features == 0 {
        return Err(Error::config("synthetic cohort needs ≥2 classes, ≥1 sample per class, ≥1 dataset and ≥1 feature"));
    }
    if cfg.n_classes * cfg.n_informative > cfg.n_features {
        return Err(Error::config(format!(
            "{} classes × {} informative features exceed {} features",
            cfg.n_classes, cfg.n_informative, cfg.n_features
        )));
    }
    if !(cfg.shift > 0.0) || !(cfg.noise_scale > 0.0) || !(cfg.dataset_bias >= 0.0) {
        return Err(Error::config("shift and noise scale must be positive, dataset bias non-negative"));
    }
    let mut r = rng::substream(cfg.seed, rng::SYNTH, 0);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let bias: Vec<Vec<f64>> = (0..cfg.n_datasets)
        .map(|_| {
            (0..cfg.n_features)
                .map(|_| (cfg.dataset_bias * std.sample(&mut r)).exp())
                .collect()
        })
        .collect();
    let n = cfg.n_classes * cfg.samples_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.samples_per_class).collect();
    let mut values = Array2::zeros((cfg.n_features, n));
    for s in 0..n {
        let c = labels[s];
        let d = s % cfg.n_datasets;
        let block = c * cfg.n_informative..(c + 1) * cfg.n_informative;
        for f in 0..cfg.n_features {
            let mut v = (cfg.noise_scale * std.sample(&mut r)).abs();
            if block.contains(&f) {
                v += cfg.shift;
            }
            values[[f, s]] = v * bias[d][f];
        }
    }
    let sample_ids: Vec<String> = (0..n).map(|s| format!("S{s:05}")).collect();
    let matrix = ExpressionMatrix::new((0..cfg.n_features).map(|f| format!("srna:syn{f:05}")).collect(), sample_ids.clone(), values)?;
    let class_names: Vec<String> = (0..cfg.n_classes).map(SynthConfig::class_name).collect();
    let metadata = sample_ids
        .iter()
        .enumerate()
        .map(|(s, id)| MetadataRow {
            sample_id: id.clone(),
            dataset_id: format!("DS{:02}", s % cfg.n_datasets),
            tissue: Some(class_names[labels[s]].clone()),
            sex: None,
            age: None,
        })
        .collect();
    Ok(AnnotatedDataset {
        matrix,
        metadata,
        label_field: LabelField::Tissue,
        labels,
        class_names,
    })
}
