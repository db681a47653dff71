use adrgnn::adr::Terms;
use adrgnn::data::{generate_splits, make_transport_task, DatasetBundle, Split, TemporalDataset, DEFAULT_RATIOS};
use adrgnn::model::{AdrGnnStatic, Model, ModelConfig};
use adrgnn::rng::rng_from_seed;
use adrgnn::train::node::initial_loss;
use adrgnn::train::studies::sample_config;
use adrgnn::train::{
    ablation_study, depth_energy_study, evaluate_node, fit_transport, grid_search, node_model_config, train_node_classification,
    train_temporal, GroupHypers, ModelKind, SplitPart, TrainConfig, TransportConfig,
};
use adrgnn::{Error, Matrix};
use rand::Rng;

mod common;

fn toy_bundle() -> DatasetBundle {
    let features = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]]);
    let split = Split {
        train: vec![true, false, true, false],
        val: vec![false, true, false, false],
        test: vec![false, false, false, true],
    };
    DatasetBundle::new("toy", 4, vec![(0, 1), (1, 2), (2, 3)], features, Some(vec![0, 0, 1, 1]), vec![split]).unwrap()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        layers: 2,
        dropout: 0.0,
        hidden_dropout: 0.0,
        epochs: 200,
        patience: 200,
        groups: GroupHypers::uniform(0.01, 0.0),
        ..TrainConfig::default()
    }
}

/// Two noisy feature clusters on a random graph with planted labels.
fn clustered_bundle(n: usize, classes: usize, seed: u64) -> DatasetBundle {
    let mut rng = common::rng(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = Matrix::zeros(n, 6);
    for i in 0..n {
        for k in 0..6 {
            let signal = if k % classes == labels[i] { 1.0 } else { 0.0 };
            x.set(i, k, signal + 0.3 * rng.random::<f64>());
        }
    }
    let g = common::random_graph(n, 0.1, seed);
    let splits = generate_splits(n, DEFAULT_RATIOS, 2, seed, None).unwrap();
    DatasetBundle::new("clusters", n, g.undirected_edges(), x, Some(labels), splits).unwrap()
}

#[test]
fn separable_toy_reaches_full_accuracy() {
    let b = toy_bundle();
    let cfg = toy_config();
    let run = train_node_classification(node_model_config(&b, &cfg), &b, 0, &cfg).unwrap();
    assert_eq!(run.test.accuracy, Some(1.0));
    assert!(run.history.len() <= 200);
}

#[test]
fn initial_loss_is_near_log_classes() {
    for classes in [2usize, 4, 7] {
        let n = 210;
        let mut rng = common::rng(classes as u64);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let x = common::random_matrix(n, 16, &mut rng);
        let g = common::random_graph(n, 0.03, 1);
        let splits = generate_splits(n, DEFAULT_RATIOS, 1, 0, None).unwrap();
        let b = DatasetBundle::new("rand", n, g.undirected_edges(), x, Some(labels), splits).unwrap();
        let cfg = TrainConfig { hidden: 16, ..TrainConfig::default() };
        let loss = initial_loss(node_model_config(&b, &cfg), &b, 0, 5).unwrap();
        let ln = (classes as f64).ln();
        assert!((loss - ln).abs() <= 0.2 * ln, "classes {classes}: loss {loss} vs ln {ln}");
    }
}

#[test]
fn runs_are_reproducible_and_restore_best_epoch() {
    let b = clustered_bundle(60, 2, 4);
    let cfg = TrainConfig { hidden: 8, layers: 2, epochs: 40, patience: 10, ..TrainConfig::default() };
    let a = train_node_classification(node_model_config(&b, &cfg), &b, 1, &cfg).unwrap();
    let c = train_node_classification(node_model_config(&b, &cfg), &b, 1, &cfg).unwrap();
    assert_eq!(a.history, c.history);
    assert_eq!(a.test, c.test);
    let max = a.history.iter().map(|h| h.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.best_val_accuracy, max);
    assert_eq!(evaluate_node(&a.model, &b, 1, SplitPart::Val).unwrap().accuracy, Some(max));
    assert_eq!(a.history[a.best_epoch].val_accuracy, max);
}

#[test]
fn non_train_labels_do_not_touch_the_training_loss() {
    let mut b = clustered_bundle(40, 2, 8);
    let cfg = TrainConfig { hidden: 8, layers: 2, epochs: 1, ..TrainConfig::default() };
    let before = train_node_classification(node_model_config(&b, &cfg), &b, 0, &cfg).unwrap().history[0].loss;
    let outside = (0..40).find(|&i| !b.splits[0].train[i]).unwrap();
    let labels = b.labels.as_mut().unwrap();
    labels[outside] = 1 - labels[outside];
    let after = train_node_classification(node_model_config(&b, &cfg), &b, 0, &cfg).unwrap().history[0].loss;
    assert_eq!(before, after);
}

#[test]
fn training_errors() {
    let mut b = toy_bundle();
    b.splits[0].train = vec![false; 4];
    let cfg = toy_config();
    assert!(matches!(train_node_classification(node_model_config(&b, &cfg), &b, 0, &cfg), Err(Error::InvalidArgument(_))));

    let mut b = toy_bundle();
    b.features = Matrix::filled(4, 2, 1e300);
    let err = train_node_classification(node_model_config(&b, &cfg), &b, 0, &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn evaluation_is_deterministic_and_shape_checked() {
    let b = toy_bundle();
    let cfg = toy_config();
    let model = Model::build(node_model_config(&b, &cfg), 0).unwrap();
    let a = evaluate_node(&model, &b, 0, SplitPart::Test).unwrap();
    assert_eq!(a, evaluate_node(&model, &b, 0, SplitPart::Test).unwrap());
    let wrong = Model::build(ModelConfig::Static(cfg.static_config(3, 2)), 0).unwrap();
    assert!(evaluate_node(&wrong, &b, 0, SplitPart::Test).is_err());
}

#[test]
fn constant_series_is_learned() {
    let frames = vec![Matrix::filled(4, 1, 0.7); 40];
    let ds = TemporalDataset::new("flat", 4, vec![(0, 1), (1, 2), (2, 3)], frames, None, 4, 1).unwrap();
    let cfg = TrainConfig { hidden: 8, groups: GroupHypers::uniform(0.005, 0.0), ..TrainConfig::temporal() };
    let run = train_temporal(cfg.temporal_config(1), &ds, &cfg).unwrap();
    let mse = run.test.mse.unwrap();
    assert!(mse <= 1e-4, "mse {mse}");
    assert!((run.test.rmse.unwrap().powi(2) - mse).abs() < 1e-12);
    assert_eq!((run.n_train_windows, run.n_test_windows), (32, 4));
}

#[test]
fn temporal_window_longer_than_series_is_rejected() {
    let frames = vec![Matrix::filled(2, 1, 0.0); 6];
    let mut ds = TemporalDataset::new("short", 2, vec![(0, 1)], frames, None, 4, 1).unwrap();
    ds.tau_in = 8;
    let cfg = TrainConfig::temporal();
    assert!(train_temporal(cfg.temporal_config(1), &ds, &cfg).is_err());
}

#[test]
fn search_samples_and_budget_one() {
    let mut rng = rng_from_seed(11);
    let mut lrs: Vec<f64> = (0..10_000).map(|_| sample_config(&TrainConfig::default(), &mut rng).groups.advection.lr).collect();
    lrs.sort_by(f64::total_cmp);
    let median = (lrs[4999] + lrs[5000]) / 2.0;
    assert!((2e-3..=5e-3).contains(&median), "median {median}");

    let b = toy_bundle();
    let base = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let r = grid_search(&b, &base, 1, 3, 0).unwrap();
    assert_eq!(r.trials.len(), 1);
    assert_eq!(r.best, r.trials[0].config);
    assert_eq!(r.best, sample_config(&base, &mut rng_from_seed(3)));
    assert!(grid_search(&b, &base, 0, 3, 0).is_err());
}

#[test]
fn reaction_only_keeps_identical_nodes_tied() {
    let mut b = clustered_bundle(30, 2, 2);
    let row = b.features.row(0).to_vec();
    b.features.row_mut(5).copy_from_slice(&row);
    let cfg = TrainConfig { hidden: 8, layers: 2, epochs: 5, terms: Terms::parse("R").unwrap(), ..TrainConfig::default() };
    let run = train_node_classification(node_model_config(&b, &cfg), &b, 0, &cfg).unwrap();
    let Model::Static(m) = &run.model else { panic!() };
    let logits = m.predict(&b.graph, &b.features).unwrap();
    assert_eq!(logits.row(0), logits.row(5));

    assert!(ablation_study(&b, &[], &cfg, &[0]).is_err());
    let rows = ablation_study(&b, &[Terms::parse("A").unwrap(), Terms::ALL], &cfg, &[0, 1]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].per_split.len(), 2);
}

#[test]
fn depth_study_energy_starts_at_one() {
    let b = clustered_bundle(30, 2, 6);
    let cfg = TrainConfig { hidden: 8, epochs: 3, ..TrainConfig::default() };
    let rows = depth_energy_study(&b, &[2, 4], &cfg, &[0]).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.relative_energy.len(), r.depth + 1);
        assert!((r.relative_energy[0] - 1.0).abs() < 1e-12);
    }
    assert_eq!(rows[1].model, ModelKind::Gcn);
}

#[test]
fn transport_terms_fit_as_expected() {
    let task = make_transport_task(5, 0.5, 2, 0).unwrap();
    let cfg = TransportConfig::default();
    let a = fit_transport(&task, Terms::parse("A").unwrap(), &cfg).unwrap();
    assert!(a.final_mse <= 1e-4, "A-only {}", a.final_mse);
    assert!(a.history.iter().all(|l| (l.mass - 1.0).abs() < 1e-12));
    for t in ["D", "R"] {
        let fit = fit_transport(&task, Terms::parse(t).unwrap(), &cfg).unwrap();
        assert!(fit.final_mse >= 1e-2, "{t}-only {}", fit.final_mse);
    }
}

#[test]
fn static_models_share_layout_with_checkpoints() {
    let b = toy_bundle();
    let cfg = toy_config();
    let ModelConfig::Static(sc) = node_model_config(&b, &cfg) else { panic!() };
    let direct = AdrGnnStatic::new(sc.clone(), 0).unwrap();
    assert_eq!(direct.store.count(), sc.param_count());
}
