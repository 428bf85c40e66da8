//! End-to-end behavior of both classifiers on synthetic cohorts.

use exprsaug::ingest::{AnnotatedDataset, ExpressionMatrix, LabelField, MetadataRow};
use exprsaug::mlp::{self, MlpConfig, MlpModel};
use exprsaug::preprocess::MatrixPipeline;
use exprsaug::rf::{fit_forest, two_stage_fit, TwoStageConfig};
use exprsaug::validation::{generate_synthetic, SynthConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(values: Array2<f64>, labels: Vec<usize>, k: usize) -> AnnotatedDataset {
    let n = labels.len();
    AnnotatedDataset {
        matrix: ExpressionMatrix::new(
            (0..values.nrows()).map(|f| format!("srna:f{f}")).collect(),
            (0..n).map(|s| format!("S{s:03}")).collect(),
            values,
        )
        .unwrap(),
        metadata: (0..n)
            .map(|s| MetadataRow {
                sample_id: format!("S{s:03}"),
                dataset_id: "D".into(),
                tissue: None,
                sex: None,
                age: None,
            })
            .collect(),
        label_field: LabelField::Tissue,
        labels,
        class_names: (0..k).map(|c| format!("c{c}")).collect(),
    }
}

/// Two blobs in [0,1]², separated by the line x0 + x1 = 1 with margin 0.2.
fn blobs(n: usize, seed: u64) -> AnnotatedDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array2::zeros((2, n));
    let mut labels = Vec::new();
    for s in 0..n {
        let c = s % 2;
        let (lo, hi) = if c == 0 { (0.0, 0.4) } else { (0.6, 1.0) };
        v[[0, s]] = r.random_range(lo..hi);
        v[[1, s]] = r.random_range(lo..hi);
        labels.push(c);
    }
    dataset(v, labels, 2)
}

fn training_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[test]
fn mlp_separates_two_blobs() {
    let d = blobs(40, 1);
    let cfg = MlpConfig { seed: 3, ..MlpConfig::new(2, 2) };
    let out = mlp::train(&d, &cfg).unwrap();
    assert_eq!(out.history.len(), 50);
    let pred = out.model.predict(d.matrix.sample_major().view()).unwrap();
    assert_eq!(training_accuracy(&pred.labels, &d.labels), 1.0);
    for row in pred.probabilities.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mlp_zero_epochs_returns_initial_model() {
    let d = blobs(10, 2);
    let cfg = MlpConfig { epochs: 0, seed: 5, ..MlpConfig::new(2, 2) };
    let out = mlp::train(&d, &cfg).unwrap();
    assert_eq!(out.model, MlpModel::init(&cfg, d.class_names.clone()).unwrap());
    assert!(out.history.is_empty());
}

#[test]
fn mlp_training_is_deterministic() {
    let d = blobs(40, 3);
    let cfg = MlpConfig { epochs: 5, seed: 9, ..MlpConfig::new(2, 2) };
    let a = mlp::train(&d, &cfg).unwrap().model.to_json().unwrap();
    let b = mlp::train(&d, &cfg).unwrap().model.to_json().unwrap();
    assert_eq!(a, b);
    let other = mlp::train(&d, &MlpConfig { seed: 10, ..cfg }).unwrap().model.to_json().unwrap();
    assert_ne!(a, other);
}

#[test]
fn mlp_rejects_single_class_and_wrong_widths() {
    let mut d = blobs(10, 4);
    assert!(mlp::train(&d, &MlpConfig::new(3, 2)).is_err());
    d.labels = vec![0; 10];
    d.class_names.truncate(1);
    assert!(mlp::train(&d, &MlpConfig::new(2, 1)).is_err());
}

#[test]
fn dropout_is_unbiased_in_expectation() {
    // Averaged over many masks, the inverted-dropout hidden activations match
    // the deterministic ones.
    let cfg = MlpConfig {
        hidden: vec![mlp::HiddenLayer { width: 6, dropout: 0.5 }],
        seed: 1,
        ..MlpConfig::new(4, 3)
    };
    let model = MlpModel::init(&cfg, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let x = Array2::from_shape_vec((1, 4), vec![0.9, 0.2, 0.7, 0.4]).unwrap();
    let infer = model.forward(x.view(), mlp::Mode::Infer).unwrap().inputs[1].clone();
    let mut r = exprsaug::rng::substream(1, exprsaug::rng::DROPOUT, 0);
    let trials = 40_000;
    let mut mean = Array2::<f64>::zeros((1, 6));
    for _ in 0..trials {
        mean += &model.forward(x.view(), mlp::Mode::Train(&mut r)).unwrap().inputs[1];
    }
    mean /= trials as f64;
    assert!(infer.iter().any(|&v| v > 0.0));
    for (got, want) in mean.iter().zip(infer.iter()) {
        assert!((got - want).abs() <= 0.02 * want, "{got} vs {want}");
    }
}

#[test]
fn forest_fits_blobs_and_ranks_informative_feature() {
    let d = blobs(60, 5);
    let f = fit_forest(&d, 25, None, 1).unwrap();
    let p = f.predict(d.matrix.values.view()).unwrap();
    assert!(training_accuracy(&p.labels, &d.labels) >= 0.95);

    // Feature 3 carries the label; the others are noise.
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let n = 80;
    let labels: Vec<usize> = (0..n).map(|s| s % 2).collect();
    let v = Array2::from_shape_fn((8, n), |(f, s)| {
        let noise: f64 = r.random();
        if f == 3 { labels[s] as f64 + 0.5 * noise } else { noise }
    });
    let d = dataset(v, labels, 2);
    let f = fit_forest(&d, 50, None, 2).unwrap();
    let best = (0..8).max_by(|&a, &b| f.importances[a].total_cmp(&f.importances[b])).unwrap();
    assert_eq!(best, 3);
    assert!(f.importances.iter().all(|&v| v >= 0.0));
    assert!((0..8).filter(|&j| j != 3).all(|j| f.importances[j] < f.importances[3]));
}

#[test]
fn forest_ignores_sample_order_and_thread_count() {
    let d = blobs(30, 6);
    let f = fit_forest(&d, 10, None, 4).unwrap();
    let rev: Vec<usize> = (0..30).rev().collect();
    let g = fit_forest(&d.subset(&rev), 10, None, 4).unwrap();
    assert_eq!(f.importances, g.importances);
    assert_eq!(f.trees, g.trees);

    for threads in [1, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let h = pool.install(|| fit_forest(&d, 10, None, 4).unwrap());
        assert_eq!(h, f);
    }
}

#[test]
fn duplicated_feature_does_not_hurt_training_accuracy() {
    let cfg = SynthConfig {
        n_features: 40,
        n_informative: 2,
        samples_per_class: 20,
        shift: 1.0,
        ..SynthConfig::default()
    };
    let d = generate_synthetic(&cfg).unwrap();
    let acc = |d: &AnnotatedDataset| {
        let f = fit_forest(d, 30, None, 3).unwrap();
        training_accuracy(&f.predict(d.matrix.values.view()).unwrap().labels, &d.labels)
    };
    let base = acc(&d);
    let mut rows: Vec<usize> = (0..40).collect();
    rows.push(0);
    let mut m = d.matrix.select_features(&rows);
    m.feature_ids[40] = "srna:dup".into();
    assert!(acc(&d.with_matrix(m).unwrap()) >= base);
}

#[test]
fn two_stage_keeps_top_features() {
    let cfg = SynthConfig {
        n_classes: 2,
        n_features: 2500,
        n_informative: 10,
        samples_per_class: 15,
        ..SynthConfig::default()
    };
    let d = generate_synthetic(&cfg).unwrap();
    let small = TwoStageConfig {
        stage1_trees: 20,
        keep: 1000,
        stage2_trees: 10,
        balance: true,
    };
    let ts = two_stage_fit(&d, &small, 1).unwrap();
    assert_eq!(ts.selected.len(), 1000);
    assert_eq!(ts.forest.feature_ids.len(), 1000);
    assert_eq!(ts.forest.mtry, 31);
}

#[test]
fn two_stage_recovers_planted_features() {
    let cfg = SynthConfig {
        n_classes: 2,
        n_features: 2000,
        n_informative: 10,
        samples_per_class: 30,
        ..SynthConfig::default()
    };
    let d = generate_synthetic(&cfg).unwrap();
    let (m, _) = MatrixPipeline::default().apply(&d.matrix).unwrap();
    let d = d.with_matrix(m).unwrap();
    let small = TwoStageConfig {
        stage1_trees: 100,
        keep: 1000,
        stage2_trees: 20,
        balance: true,
    };
    let ts = two_stage_fit(&d, &small, 2).unwrap();
    for f in cfg.informative_features() {
        assert!(ts.selected.contains(&f), "planted feature {f} not kept");
    }
}
