use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use exprsaug::attribution::{
    class_average_scores, deeplift_scores, heatmap_svg, knockout, score_tsv, select_rows, stability_matrix,
    top_n_features, KnockoutMode, StabilityReport,
};
use exprsaug::ingest::{
    join, load_expression_matrix, merge_matrices, AnnotatedDataset, ExpressionMatrix, LabelField, MetadataTable,
    Namespace,
};
use exprsaug::mlp::{self, AdamHyper, HiddenLayer, MlpModel};
use exprsaug::preprocess::{
    apply_minmax, filter_small_classes, group_tissues, rpm_normalize, AgeBinning, MatrixPipeline, ScalerParams,
    TissueGroupMap,
};
use exprsaug::rf::{two_stage_fit, Forest, TwoStageConfig};
use exprsaug::validation::{
    cross_validate, generate_synthetic, one_dataset_out, one_dataset_out_all, plan_with_class_coverage, EvalOptions,
    EvalOutcome, EvalReport, Learner, MlpLearner, RfLearner, SynthConfig,
};
use exprsaug::{Error, Result};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::Parsed;
use crate::output::{write_manifest, OutDir};

/// What one subcommand produced, for the manifest.
struct Ran {
    out: OutDir,
    inputs: Vec<PathBuf>,
}

pub fn execute(parsed: Parsed) -> Result<()> {
    let Parsed {
        cli,
        command,
        effective,
    } = parsed;
    let common = match &cli.command {
        Command::Synth { common, .. }
        | Command::Preprocess { common, .. }
        | Command::Train { common, .. }
        | Command::Predict { common, .. }
        | Command::Explain { common, .. } => common,
        Command::Validate { mode } => match mode {
            ValidateMode::Cv { common, .. } | ValidateMode::Odo { common, .. } => common,
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("cannot start {:?} worker threads: {e}", common.threads)))?;
    let ran = pool.install(|| dispatch(&cli.command))?;
    let mut inputs = ran.inputs;
    if let Some(c) = &common.config {
        inputs.push(c.clone());
    }
    write_manifest(&ran.out, &command, common.seed, &effective, &inputs)
}

fn dispatch(command: &Command) -> Result<Ran> {
    match command {
        Command::Synth { common, synth } => synth_cmd(common, synth),
        Command::Preprocess { common, inputs, prep } => preprocess_cmd(common, inputs, prep),
        Command::Train {
            common,
            inputs,
            prep,
            model,
        } => train_cmd(common, inputs, prep, model),
        Command::Predict { common, inputs, bundle } => predict_cmd(common, inputs, bundle),
        Command::Validate { mode } => match mode {
            ValidateMode::Cv {
                common,
                inputs,
                prep,
                model,
                eval,
                folds,
            } => cv_cmd(common, inputs, prep, model, eval, *folds),
            ValidateMode::Odo {
                common,
                inputs,
                prep,
                model,
                eval,
                dataset,
            } => odo_cmd(common, inputs, prep, model, eval, dataset.as_deref()),
        },
        Command::Explain {
            common,
            inputs,
            bundle,
            explain,
        } => explain_cmd(common, inputs, bundle, explain),
    }
}

fn synth_cmd(common: &Common, a: &SynthArgs) -> Result<Ran> {
    let cfg = SynthConfig {
        n_classes: a.classes,
        n_features: a.features,
        n_informative: a.informative,
        samples_per_class: a.per_class,
        shift: a.shift,
        noise_scale: a.noise,
        n_datasets: a.datasets,
        dataset_bias: a.dataset_bias,
        seed: common.seed,
    };
    let data = generate_synthetic(&cfg)?;
    let mut out = OutDir::create(&common.out)?;
    data.matrix.write_tsv(&out.path("srna.tsv"))?;
    out.record("srna.tsv")?;
    MetadataTable::new(data.metadata.clone())?.write_tsv(&out.path("metadata.tsv"))?;
    out.record("metadata.tsv")?;
    let mut truth = String::from("class\tfeature_id\n");
    for c in 0..cfg.n_classes {
        for f in c * cfg.n_informative..(c + 1) * cfg.n_informative {
            let _ = writeln!(truth, "{}\t{}", SynthConfig::class_name(c), data.matrix.feature_ids[f]);
        }
    }
    out.write("informative.tsv", truth)?;
    println!(
        "wrote {} samples × {} features in {} classes to {}",
        data.n_samples(),
        data.n_features(),
        data.n_classes(),
        common.out.display()
    );
    Ok(Ran { out, inputs: vec![] })
}

fn feature_set_name(fs: FeatureSet) -> &'static str {
    match fs {
        FeatureSet::Srna => "srna",
        FeatureSet::Contam => "contam",
        FeatureSet::Both => "both",
    }
}

fn parse_feature_set(s: &str) -> Result<FeatureSet> {
    match s {
        "srna" => Ok(FeatureSet::Srna),
        "contam" => Ok(FeatureSet::Contam),
        "both" => Ok(FeatureSet::Both),
        other => Err(Error::data(format!("unknown feature set {other:?} in model bundle"))),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::config(format!("{what} is required")))
}

/// Loads the matrices of `fs` and returns them merged, plus the paths read.
fn load_features(inputs: &InputArgs, fs: FeatureSet) -> Result<(ExpressionMatrix, Vec<PathBuf>)> {
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| Error::config(format!("feature set {} requires {flag}", feature_set_name(fs))))
    };
    match fs {
        FeatureSet::Srna => {
            let p = need(&inputs.srna, "--srna")?;
            Ok((load_expression_matrix(&p, Namespace::Srna)?, vec![p]))
        }
        FeatureSet::Contam => {
            let p = need(&inputs.contam, "--contam")?;
            Ok((load_expression_matrix(&p, Namespace::Contam)?, vec![p]))
        }
        FeatureSet::Both => {
            let (ps, pc) = (need(&inputs.srna, "--srna")?, need(&inputs.contam, "--contam")?);
            let s = load_expression_matrix(&ps, Namespace::Srna)?;
            let c = load_expression_matrix(&pc, Namespace::Contam)?;
            let c = align_samples(&c, &s.sample_ids)?;
            Ok((merge_matrices(&s, &c)?, vec![ps, pc]))
        }
    }
}

/// Reorders the sample columns of `m` to `order`; both must hold the same ids.
fn align_samples(m: &ExpressionMatrix, order: &[String]) -> Result<ExpressionMatrix> {
    if m.sample_ids == order {
        return Ok(m.clone());
    }
    let pos: HashMap<&str, usize> = m.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let cols = order
        .iter()
        .map(|s| {
            pos.get(s.as_str())
                .copied()
                .ok_or_else(|| Error::data(format!("sample {s:?} missing from the contaminant matrix")))
        })
        .collect::<Result<Vec<_>>>()?;
    if cols.len() != m.n_samples() {
        return Err(Error::data("sRNA and contaminant matrices hold different samples"));
    }
    Ok(m.select_samples(&cols))
}

fn label_field(l: Label) -> LabelField {
    match l {
        Label::Tissue => LabelField::Tissue,
        Label::Sex => LabelField::Sex,
        Label::Age => LabelField::AgeInterval,
    }
}

/// Metadata settings needed to turn a metadata table into labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelSpec {
    label_field: LabelField,
    age_scheme: Option<u8>,
    group_tissues: bool,
}

impl LabelSpec {
    fn from_prep(p: &PrepArgs) -> Result<Self> {
        let field = label_field(p.label_field);
        if field == LabelField::AgeInterval && p.age_scheme.is_none() {
            return Err(Error::config("--label-field age requires --age-scheme"));
        }
        Ok(Self {
            label_field: field,
            age_scheme: p.age_scheme,
            group_tissues: p.group_tissues,
        })
    }

    fn join(&self, matrix: &ExpressionMatrix, metadata: &Path) -> Result<(AnnotatedDataset, MetadataTable)> {
        let mut meta = MetadataTable::load(metadata)?;
        if self.group_tissues {
            meta = group_tissues(&meta, &TissueGroupMap::builtin());
        }
        let bins = self.age_scheme.map(|k| AgeBinning::scheme(k as usize)).transpose()?;
        let joined = join(matrix, &meta, self.label_field, bins.as_ref())?;
        if joined.dropped > 0 {
            log::warn!("{} samples lack a {} label and were dropped", joined.dropped, self.label_field);
        }
        Ok((joined.dataset, meta))
    }
}

/// Everything needed to push new samples through the fitted preprocessing.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Bundle {
    format_version: u32,
    model: String,
    feature_set: String,
    labels: LabelSpec,
    rpm: bool,
    /// Feature ids before zero filtering, in matrix order.
    input_features: Vec<String>,
    scaler: Option<ScalerParams>,
    /// Model input features, in order.
    features: Vec<String>,
    class_names: Vec<String>,
}

struct Prepared {
    data: AnnotatedDataset,
    input_features: Vec<String>,
    scaler: Option<ScalerParams>,
    inputs: Vec<PathBuf>,
}

/// Load → join → class filter → RPM/MinMax/zero filter. MinMax is skipped
/// when `scale` is false (fold-safe evaluation scales per fold instead).
fn prepare(inputs: &InputArgs, prep: &PrepArgs, scale: bool) -> Result<Prepared> {
    let spec = LabelSpec::from_prep(prep)?;
    let meta_path = required(&inputs.metadata, "--metadata")?;
    if let Some(t) = prep.zero_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("--zero-threshold {t} outside [0, 1]")));
        }
    }
    let (matrix, mut paths) = load_features(inputs, prep.feature_set)?;
    let (mut data, _) = spec.join(&matrix, meta_path)?;
    paths.push(meta_path.clone());
    if let Some(n) = prep.min_class_size {
        data = filter_small_classes(&data, n)?;
    }
    let input_features = data.matrix.feature_ids.clone();
    let pipeline = MatrixPipeline {
        rpm: prep.rpm,
        minmax: prep.minmax && scale,
        zero_threshold: prep.zero_threshold,
    };
    let (m, scaler) = pipeline.apply(&data.matrix)?;
    if m.n_features() == 0 {
        return Err(Error::data("no feature survives zero filtering"));
    }
    let data = data.with_matrix(m)?;
    Ok(Prepared {
        data,
        input_features,
        scaler,
        inputs: paths,
    })
}

fn preprocess_cmd(common: &Common, inputs: &InputArgs, prep: &PrepArgs) -> Result<Ran> {
    let p = prepare(inputs, prep, true)?;
    let mut out = OutDir::create(&common.out)?;
    p.data.matrix.write_tsv(&out.path("matrix.tsv"))?;
    out.record("matrix.tsv")?;
    MetadataTable::new(p.data.metadata.clone())?.write_tsv(&out.path("metadata.tsv"))?;
    out.record("metadata.tsv")?;
    let mut labels = String::from("sample_id\tlabel\n");
    for (s, &y) in p.data.matrix.sample_ids.iter().zip(&p.data.labels) {
        let _ = writeln!(labels, "{s}\t{}", p.data.class_names[y]);
    }
    out.write("labels.tsv", labels)?;
    if let Some(sc) = &p.scaler {
        out.write("scaler.json", serde_json::to_string_pretty(sc)? + "\n")?;
    }
    println!(
        "{} samples × {} features, {} classes",
        p.data.n_samples(),
        p.data.n_features(),
        p.data.n_classes()
    );
    Ok(Ran {
        out,
        inputs: p.inputs,
    })
}

fn parse_hidden(s: &str) -> Result<Vec<HiddenLayer>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (w, d) = t.split_once(':').unwrap_or((t, "0"));
            let width = w.trim().parse().map_err(|_| Error::config(format!("bad hidden width in {t:?}")))?;
            let dropout = d.trim().parse().map_err(|_| Error::config(format!("bad dropout rate in {t:?}")))?;
            Ok(HiddenLayer { width, dropout })
        })
        .collect()
}

fn mlp_learner(m: &ModelArgs) -> Result<MlpLearner> {
    Ok(MlpLearner {
        hidden: parse_hidden(&m.hidden)?,
        epochs: m.epochs,
        batch_size: m.batch_size,
        adam: AdamHyper {
            learning_rate: m.learning_rate,
            ..AdamHyper::default()
        },
    })
}

fn rf_config(m: &ModelArgs) -> TwoStageConfig {
    TwoStageConfig {
        stage1_trees: m.stage1_trees,
        keep: m.keep,
        stage2_trees: m.stage2_trees,
        balance: m.balance,
    }
}

fn learner(m: &ModelArgs) -> Result<Box<dyn Learner>> {
    Ok(match m.model {
        ModelKind::Mlp => Box::new(mlp_learner(m)?),
        ModelKind::Rf => Box::new(RfLearner { config: rf_config(m) }),
    })
}

fn train_cmd(common: &Common, inputs: &InputArgs, prep: &PrepArgs, model: &ModelArgs) -> Result<Ran> {
    let p = prepare(inputs, prep, true)?;
    let data = &p.data;
    let mut out = OutDir::create(&common.out)?;
    let kind = match model.model {
        ModelKind::Mlp => {
            let cfg = mlp_learner(model)?.config_for(data, common.seed);
            let trained = mlp::train(data, &cfg)?;
            out.write("model.json", trained.model.to_json()? + "\n")?;
            let mut hist = String::from("epoch\tloss\n");
            for (e, l) in trained.history.iter().enumerate() {
                let _ = writeln!(hist, "{}\t{l}", e + 1);
            }
            out.write("history.tsv", hist)?;
            "mlp"
        }
        ModelKind::Rf => {
            let fitted = two_stage_fit(data, &rf_config(model), common.seed)?;
            out.write("model.json", fitted.forest.to_json()? + "\n")?;
            let mut imp = String::from("feature_id\timportance\tselected\n");
            let selected: std::collections::HashSet<usize> = fitted.selected.iter().copied().collect();
            for (j, v) in fitted.stage1.importances.iter().enumerate() {
                let _ = writeln!(imp, "{}\t{v}\t{}", data.matrix.feature_ids[j], selected.contains(&j));
            }
            out.write("importances.tsv", imp)?;
            "rf"
        }
    };
    let bundle = Bundle {
        format_version: 1,
        model: kind.to_owned(),
        feature_set: feature_set_name(prep.feature_set).to_owned(),
        labels: LabelSpec::from_prep(prep)?,
        rpm: prep.rpm,
        input_features: p.input_features.clone(),
        scaler: p.scaler.clone(),
        features: data.matrix.feature_ids.clone(),
        class_names: data.class_names.clone(),
    };
    out.write("preprocess.json", serde_json::to_string_pretty(&bundle)? + "\n")?;
    println!(
        "trained {kind} on {} samples × {} features, {} classes",
        data.n_samples(),
        data.n_features(),
        data.n_classes()
    );
    Ok(Ran {
        out,
        inputs: p.inputs,
    })
}

struct LoadedBundle {
    bundle: Bundle,
    model_json: String,
    paths: Vec<PathBuf>,
}

fn load_bundle(b: &BundleArgs) -> Result<LoadedBundle> {
    let bp = b.model_dir.join("preprocess.json");
    let mp = b.model_dir.join("model.json");
    let text = std::fs::read_to_string(&bp).map_err(|e| Error::io(&bp, e))?;
    let bundle: Bundle = serde_json::from_str(&text)?;
    if bundle.format_version != 1 {
        return Err(Error::data(format!("unsupported bundle format_version {}", bundle.format_version)));
    }
    let model_json = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    Ok(LoadedBundle {
        bundle,
        model_json,
        paths: vec![bp, mp],
    })
}

/// Applies a bundle's preprocessing to freshly loaded matrices. Features the
/// model was trained on but the input lacks are treated as unexpressed.
fn transform(inputs: &InputArgs, bundle: &Bundle) -> Result<(ExpressionMatrix, Vec<PathBuf>)> {
    let (raw, paths) = load_features(inputs, parse_feature_set(&bundle.feature_set)?)?;
    let pos: HashMap<&str, usize> = raw.feature_ids.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let mut values = Array2::zeros((bundle.input_features.len(), raw.n_samples()));
    let mut missing = 0;
    for (r, f) in bundle.input_features.iter().enumerate() {
        match pos.get(f.as_str()) {
            Some(&i) => values.row_mut(r).assign(&raw.values.row(i)),
            None => missing += 1,
        }
    }
    if missing > 0 {
        log::warn!("{missing} model features absent from the input; treated as zero");
    }
    let mut m = ExpressionMatrix::new(bundle.input_features.clone(), raw.sample_ids.clone(), values)?;
    if bundle.rpm {
        m = rpm_normalize(&m)?;
    }
    if let Some(sc) = &bundle.scaler {
        m = apply_minmax(&m, sc)?;
    }
    let keep: HashMap<&str, usize> = m.feature_ids.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let rows: Vec<usize> = bundle.features.iter().map(|f| keep[f.as_str()]).collect();
    Ok((m.select_features(&rows), paths))
}

fn predict_cmd(common: &Common, inputs: &InputArgs, b: &BundleArgs) -> Result<Ran> {
    let lb = load_bundle(b)?;
    let (m, mut paths) = transform(inputs, &lb.bundle)?;
    paths.extend(lb.paths);
    let (labels, scores, classes) = match lb.bundle.model.as_str() {
        "mlp" => {
            let model = MlpModel::from_json(&lb.model_json)?;
            let p = model.predict(m.sample_major().view())?;
            (p.labels, p.probabilities, model.class_names)
        }
        "rf" => {
            let forest = Forest::from_json(&lb.model_json)?;
            let p = forest.predict_matrix(&m)?;
            (p.labels, p.votes, forest.class_names)
        }
        other => return Err(Error::data(format!("unknown model kind {other:?}"))),
    };
    let mut text = String::from("sample_id\tpredicted");
    for c in &classes {
        let _ = write!(text, "\t{c}");
    }
    text.push('\n');
    for (s, sid) in m.sample_ids.iter().enumerate() {
        let _ = write!(text, "{sid}\t{}", classes[labels[s]]);
        for v in scores.row(s) {
            let _ = write!(text, "\t{v}");
        }
        text.push('\n');
    }
    let mut out = OutDir::create(&common.out)?;
    out.write("predictions.tsv", text)?;
    println!("predicted {} samples", m.n_samples());
    Ok(Ran { out, inputs: paths })
}

fn write_report(out: &mut OutDir, report: &EvalReport) -> Result<()> {
    out.write("confusion.tsv", report.confusion_tsv())?;
    out.write("per_class.tsv", report.per_class_tsv())?;
    out.write("report.json", serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

fn write_folds(out: &mut OutDir, outcome: &EvalOutcome) -> Result<()> {
    let mut text = String::from("fold\tsample_id\n");
    for (f, d) in outcome.folds.iter().enumerate() {
        for s in &d.test_ids {
            let _ = writeln!(text, "{f}\t{s}");
        }
    }
    out.write("folds.tsv", text)?;
    Ok(())
}

fn cv_cmd(common: &Common, inputs: &InputArgs, prep: &PrepArgs, model: &ModelArgs, eval: &EvalArgs, folds: usize) -> Result<Ran> {
    let p = prepare(inputs, prep, !eval.fold_safe_scaling)?;
    let learner = learner(model)?;
    let plan = plan_with_class_coverage(&p.data, folds, common.seed)?;
    let options = EvalOptions {
        fold_safe_scaling: eval.fold_safe_scaling,
    };
    let outcome = cross_validate(learner.as_ref(), &p.data, &plan, options, common.seed)?;
    let mut out = OutDir::create(&common.out)?;
    write_report(&mut out, &outcome.report)?;
    write_folds(&mut out, &outcome)?;
    let summary = outcome.report.summary();
    out.write("summary.txt", &summary)?;
    print!("{summary}");
    Ok(Ran {
        out,
        inputs: p.inputs,
    })
}

fn odo_cmd(
    common: &Common,
    inputs: &InputArgs,
    prep: &PrepArgs,
    model: &ModelArgs,
    eval: &EvalArgs,
    dataset: Option<&str>,
) -> Result<Ran> {
    let p = prepare(inputs, prep, !eval.fold_safe_scaling)?;
    let learner = learner(model)?;
    let options = EvalOptions {
        fold_safe_scaling: eval.fold_safe_scaling,
    };
    let mut out = OutDir::create(&common.out)?;
    let summary = match dataset {
        Some(id) => {
            let outcome = one_dataset_out(learner.as_ref(), &p.data, id, options, common.seed)?;
            write_report(&mut out, &outcome.report)?;
            format!("held_out\t{id}\n{}", outcome.report.summary())
        }
        None => {
            let sweep = one_dataset_out_all(learner.as_ref(), &p.data, options, common.seed)?;
            write_report(&mut out, &sweep.pooled)?;
            let mut per = String::from("dataset\taccuracy\tcorrect\ttotal\n");
            for (id, r) in &sweep.per_dataset {
                let _ = writeln!(per, "{id}\t{}\t{}\t{}", r.accuracy, r.correct, r.total);
            }
            for id in &sweep.skipped {
                let _ = writeln!(per, "{id}\t\t\t");
            }
            out.write("datasets.tsv", per)?;
            let mut s = format!("mean_dataset_accuracy\t{}\n", sweep.mean_dataset_accuracy());
            if let Some(r) = sweep.mean_class_recall() {
                let _ = writeln!(s, "mean_class_recall\t{r}");
            }
            let _ = writeln!(s, "skipped_datasets\t{}", sweep.skipped.join(","));
            let _ = write!(s, "pooled_accuracy\t{}\n", sweep.pooled.accuracy);
            s
        }
    };
    out.write("summary.txt", &summary)?;
    print!("{summary}");
    Ok(Ran {
        out,
        inputs: p.inputs,
    })
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn explain_cmd(common: &Common, inputs: &InputArgs, b: &BundleArgs, a: &ExplainArgs) -> Result<Ran> {
    if a.sample.is_none() && !a.class_scores && !a.stability && !a.similarity {
        return Err(Error::config(
            "explain needs at least one of --sample, --class-scores, --stability, --similarity",
        ));
    }
    let lb = load_bundle(b)?;
    if lb.bundle.model != "mlp" {
        return Err(Error::config("explain works on MLP models only"));
    }
    let model = MlpModel::from_json(&lb.model_json)?;
    let (m, mut paths) = transform(inputs, &lb.bundle)?;
    paths.extend(lb.paths);
    let x = m.sample_major();
    let features = &m.feature_ids;
    let classes = &model.class_names;
    let mut out = OutDir::create(&common.out)?;

    if let Some(id) = &a.sample {
        let i = m
            .sample_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::data(format!("sample {id:?} not in the input matrix")))?;
        let row = x.index_axis(Axis(0), i);
        let c = deeplift_scores(&model, row.insert_axis(Axis(0)), None)?;
        let name = format!("sample_{}", file_safe(id));
        out.write(&format!("{name}.tsv"), score_tsv(c.sample(0), features, classes))?;
        if a.svg {
            out.write(&format!("{name}.svg"), heatmap_svg(c.sample(0), features, classes))?;
        }
        let k = knockout(&model, row, KnockoutMode::Stability, a.max_steps)?;
        println!(
            "sample {id}: predicted {}, stability {} steps{}, becomes {}",
            classes[k.original],
            k.steps,
            if k.flipped { "" } else { " (no flip)" },
            classes[k.new_class]
        );
    }

    if a.class_scores || a.stability || a.similarity {
        let meta = required(&inputs.metadata, "--metadata")?;
        let (data, _) = lb.bundle.labels.join(&m, meta)?;
        paths.push(meta.clone());
        let idx: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut cols = Vec::new();
        let mut labels = Vec::new();
        for (s, &y) in data.labels.iter().enumerate() {
            if let Some(&k) = idx.get(data.class_names[y].as_str()) {
                cols.push(s);
                labels.push(k);
            }
        }
        if cols.is_empty() {
            return Err(Error::data("no labeled sample belongs to a class the model knows"));
        }
        let xs = data.matrix.select_samples(&cols).sample_major();

        if a.class_scores {
            let c = deeplift_scores(&model, xs.view(), None)?;
            let table = class_average_scores(&c, &labels)?;
            out.write("class_scores.tsv", score_tsv(table.d1.view(), features, classes))?;
            let mut top = String::from("class\trank\tfeature_id\tscore\n");
            let mut rows: Vec<usize> = Vec::new();
            for k in 0..classes.len() {
                for (r, j) in top_n_features(&table, k, a.top).into_iter().enumerate() {
                    let _ = writeln!(top, "{}\t{}\t{}\t{}", classes[k], r + 1, features[j], table.d1[[j, k]]);
                    if !rows.contains(&j) {
                        rows.push(j);
                    }
                }
            }
            out.write("top_features.tsv", top)?;
            if a.svg && !rows.is_empty() {
                let names: Vec<String> = rows.iter().map(|&j| features[j].clone()).collect();
                out.write(
                    "class_scores_top.svg",
                    heatmap_svg(select_rows(table.d1.view(), &rows).view(), &names, classes),
                )?;
            }
        }

        if a.stability || a.similarity {
            let report = stability_matrix(&model, xs.view(), &labels, a.max_steps)?;
            if a.stability {
                out.write("stability.tsv", stability_tsv(&report, classes))?;
            }
            if a.similarity {
                out.write("similarity.tsv", similarity_tsv(&report, classes))?;
                if a.svg && report.missing.is_empty() {
                    let k = classes.len();
                    let grid = Array2::from_shape_fn((k, k), |(r, c)| report.similarity[r][c].unwrap_or(0.0));
                    out.write("similarity.svg", heatmap_svg(grid.view(), classes, classes))?;
                }
            }
            println!(
                "knockouts over {} samples (cap {} steps), {} without a flip",
                report.samples_used.iter().sum::<usize>(),
                report.max_steps,
                report.no_flip
            );
        }
    }
    Ok(Ran { out, inputs: paths })
}

fn stability_tsv(r: &StabilityReport, classes: &[String]) -> String {
    let mut s = String::from("class\tmean_steps\tsamples_used\n");
    for (k, c) in classes.iter().enumerate() {
        let _ = writeln!(s, "{c}\t{}\t{}", fmt_opt(r.stability[k]), r.samples_used[k]);
    }
    s
}

fn similarity_tsv(r: &StabilityReport, classes: &[String]) -> String {
    let mut s = String::from("class");
    for c in classes {
        let _ = write!(s, "\t{c}");
    }
    s.push('\n');
    for (k, c) in classes.iter().enumerate() {
        s.push_str(c);
        for v in &r.similarity[k] {
            let _ = write!(s, "\t{}", fmt_opt(*v));
        }
        s.push('\n');
    }
    s
}
