use std::sync::Arc;

use gridtwin_core::env::GridModel;
use gridtwin_core::grid::{Action, GridState, NetworkSpec};
use gridtwin_core::terminal::{build_terminal_dataset, fit_gbt, GbtModel, GbtParams};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dataset_is_balanced_and_labels_are_true() {
    let spec = NetworkSpec::default_anm6();
    let d = build_terminal_dataset(&spec, 60, 288, 1).unwrap();
    assert_eq!(d.y.len(), 60);
    assert_eq!(d.terminal_fraction(), 0.5);
    assert!(d.collapse_rate > 0.0 && d.collapse_rate < 0.1);
    let model = GridModel::new(Arc::new(spec.clone()));
    let sd = spec.state_dim();
    for (row, &label) in d.x.rows().into_iter().zip(&d.y) {
        let v = row.to_vec();
        let s = GridState::decode(&spec, &v[..sd]).unwrap();
        let a = Action::decode(&spec, &v[sd..]).unwrap();
        assert_eq!(model.step(&s, &a).unwrap().done, label);
    }
}

#[test]
fn split_partitions_rows() {
    let spec = NetworkSpec::default_anm6();
    let d = build_terminal_dataset(&spec, 40, 288, 2).unwrap();
    let (train, test) = d.split(0.25, 0);
    assert_eq!(test.y.len(), 10);
    assert_eq!(train.y.len() + test.y.len(), 40);
    assert_eq!(d.split(0.25, 0), (train, test));
}

#[test]
fn fit_is_deterministic_and_file_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_fn((300, 5), |_| rng.random_range(-1.0..1.0));
    let y: Vec<bool> = x.rows().into_iter().map(|r| r[0] + r[3] > 0.2).collect();
    let p = GbtParams::default();
    let m = fit_gbt(x.view(), &y, &p).unwrap();
    assert_eq!(m, fit_gbt(x.view(), &y, &p).unwrap());
    assert!(m.trees.iter().all(|t| t.depth() <= p.max_depth));
    assert!(m.accuracy(x.view(), &y) > 0.8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gbt.json");
    m.save(&path).unwrap();
    assert_eq!(GbtModel::load(&path).unwrap(), m);
}

#[test]
fn corrupt_model_json_is_rejected() {
    assert!(GbtModel::from_json("{").is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_fn((50, 2), |_| rng.random_range(-1.0..1.0));
    let y: Vec<bool> = x.column(1).iter().map(|v| *v > 0.0).collect();
    let mut m = fit_gbt(x.view(), &y, &GbtParams::default()).unwrap();
    m.n_features = 1;
    assert!(GbtModel::from_json(&m.to_json()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn probabilities_are_in_unit_interval(seed in 0u64..1000, q in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((60, 3), |_| rng.random_range(-1.0..1.0));
        let y: Vec<bool> = x.rows().into_iter().map(|r| r[1] > 0.1 * seed as f64 % 0.9 - 0.45).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let m = fit_gbt(x.view(), &y, &GbtParams::default()).unwrap();
        let probe = ndarray::array![q, -q, q * 0.5];
        let (p, label) = m.predict(probe.view());
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(label, p >= 0.5);
    }
}
