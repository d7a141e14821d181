//! End-to-end use of the public API: cohort, dFNC, training, evaluation and
//! attribution on a tiny problem.

use fstmamba_core::attribution::integrated_gradients;
use fstmamba_core::dfnc::{generate_synthetic_cohort, sliding_window_dfnc, CouplingEffect, SyntheticCohortSpec};
use fstmamba_core::metrics::evaluate_indices;
use fstmamba_core::model::{ModelConfig, Task};
use fstmamba_core::topology::{cva, cva_scatter, cvr};
use fstmamba_core::train::{train, Dataset, TrainConfig};
use fstmamba_core::Tensor;
use proptest::prelude::*;

fn tiny_problem(seed: u64) -> (Dataset, ModelConfig) {
    let spec = SyntheticCohortSpec {
        n_subjects: 24,
        n_components: 8,
        n_networks: 2,
        t_total: 24,
        window: 10,
        class_count: 2,
        effects: vec![CouplingEffect { class: 1, network_a: 0, network_b: 1, offset: 0.5 }],
        ar_coefficient: 0.2,
        noise_std: 0.3,
        seed,
        tr_seconds: 3.0,
    };
    let cohort = generate_synthetic_cohort(&spec).unwrap();
    let dfnc = sliding_window_dfnc(&cohort.series, 10, 7).unwrap();
    let mut cfg = ModelConfig::small(cohort.atlas, 8, &[1, 1], &[2, 1], Task::BinaryClassification, seed).unwrap();
    cfg.encoder.state_size = 4;
    let y = cohort.labels.iter().map(|&l| l as f64).collect();
    let data = Dataset::from_dfnc(&dfnc, &cfg.atlas, y, Task::BinaryClassification).unwrap();
    (data, cfg)
}

#[test]
fn train_evaluate_attribute() {
    let (data, cfg) = tiny_problem(5);
    assert_eq!(data.len(), 24);
    let tc = TrainConfig { lr: 3e-3, batch_size: 8, epochs: 2, seed: 5, ..Default::default() };
    let out = train(&cfg, &tc, &data).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.diverged_at.is_none());
    assert_eq!(out.train_indices.len() + out.val_indices.len(), 24);

    let report = evaluate_indices(&out.model, &data, &out.val_indices, 4).unwrap();
    assert_eq!(report.n, out.val_indices.len());
    assert!(report.loss.is_finite());
    assert!((0.0..=1.0).contains(&report.auc.unwrap()));

    let map = integrated_gradients(&out.model, &data.sample(0), None, 16, None).unwrap();
    assert_eq!(map.values.shape(), &[8, 8, 3]);
    assert_eq!(map.temporal_mean.shape(), &[8, 8]);
    assert!(map.completeness_residual.is_finite());
}

#[test]
fn same_seed_same_run() {
    let run = || {
        let (data, cfg) = tiny_problem(9);
        let tc = TrainConfig { lr: 3e-3, batch_size: 8, epochs: 1, seed: 9, ..Default::default() };
        train(&cfg, &tc, &data).unwrap().history
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rearrangements_invert(
        (s, data) in prop_oneof![Just(2usize), Just(4usize)]
            .prop_flat_map(|s| (Just(s), proptest::collection::vec(-1.0f64..1.0, 8 * 8 * 3))),
        r in -9i64..9,
    ) {
        let x = Tensor::from_vec(&[1, 8, 8, 3], data).unwrap();
        let groups = cva(&x, s).unwrap();
        prop_assert_eq!(groups.shape(), &[s, 8 / s, 8 / s, 3]);
        prop_assert_eq!(cva_scatter(&groups, &x, s).unwrap(), x.clone());
        prop_assert_eq!(cvr(&cvr(&x, r).unwrap(), -r).unwrap(), x);
    }
}
