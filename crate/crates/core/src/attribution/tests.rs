use super::*;
use crate::metrics::evaluate_indices;
use crate::model::ModelConfig;
use crate::topology::ComponentAtlas;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

#[test]
fn linear_function_is_exact_at_any_step_count() {
    let x = random(&[3, 4], 1);
    let base = random(&[3, 4], 2);
    let w = random(&[3, 4], 3);
    for m in [1, 2, 7, 64] {
        let ig = path_integral(&x, &base, m, &mut |pts| {
            let k = pts.shape()[0];
            Tensor::from_vec(pts.shape(), w.data().iter().copied().cycle().take(k * w.len()).collect())
        })
        .unwrap();
        for i in 0..x.len() {
            assert!((ig[i] - (x[i] - base[i]) * w[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn quadratic_function_matches_the_right_riemann_sum() {
    // F = sum x^2 from a zero baseline: IG_i = x_i^2 (m + 1) / m
    let x = random(&[5], 4);
    let m = 10;
    let ig = path_integral(&x, &Tensor::zeros(&[5]), m, &mut |pts| Ok(pts.map(|v| 2.0 * v))).unwrap();
    for i in 0..5 {
        assert!((ig[i] - x[i] * x[i] * 11.0 / 10.0).abs() < 1e-12);
    }
}

#[test]
fn non_finite_gradients_name_the_step() {
    let x = Tensor::full(&[2], 1.0);
    let mut calls = 0;
    let err = path_integral(&x, &Tensor::zeros(&[2]), 20, &mut |pts| {
        calls += 1;
        let mut g = Tensor::zeros(pts.shape());
        if calls == 2 {
            g[2 * 3] = f64::NAN;
        }
        Ok(g)
    })
    .unwrap_err();
    // second chunk starts at step 9; its fourth point is step 12
    assert!(matches!(&err, Error::NonFinite { location } if location.contains("step 12")), "{err}");
    assert!(path_integral(&x, &Tensor::zeros(&[3]), 4, &mut |p| Ok(p.clone())).is_err());
    assert!(path_integral(&x, &x, 0, &mut |p| Ok(p.clone())).is_err());
}

fn tiny_model(seed: u64) -> FstMamba {
    let atlas = ComponentAtlas::uniform(7, 2).unwrap();
    let mut cfg = ModelConfig::small(atlas, 8, &[2, 2], &[2, 1], Task::BinaryClassification, seed).unwrap();
    cfg.encoder.state_size = 4;
    FstMamba::new(cfg).unwrap()
}

fn padded_sample(model: &FstMamba, t: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (p, n) = (model.cfg.atlas.n_padded, model.cfg.atlas.n_components);
    Tensor::from_fn(&[p, p, t, 1], |i| if i[0] < n && i[1] < n { r.random_range(-1.0..1.0) } else { 0.0 })
}

#[test]
fn input_equal_to_baseline_gives_zero_map() {
    let model = tiny_model(1);
    let x = padded_sample(&model, 3, 2);
    let map = integrated_gradients(&model, &x, Some(&x), 4, None).unwrap();
    assert!(map.values.data().iter().all(|&v| v == 0.0));
    assert_eq!(map.values.shape(), &[7, 7, 3]);
    assert_eq!(map.temporal_mean.shape(), &[7, 7]);
    assert_eq!(map.f_input, map.f_baseline);
}

#[test]
fn completeness_gap_shrinks_like_one_over_m() {
    let model = tiny_model(3);
    for seed in 0..4 {
        let x = padded_sample(&model, 3, 10 + seed);
        let coarse = integrated_gradients(&model, &x, None, 128, None).unwrap();
        let fine = integrated_gradients(&model, &x, None, 512, None).unwrap();
        let ratio = fine.completeness_residual / coarse.completeness_residual;
        assert!((0.2..0.3).contains(&ratio), "seed {seed}: ratio {ratio}");
        let temporal: f64 = coarse.values.data().chunks(3).map(|c| c.iter().sum::<f64>() / 3.0).sum();
        assert!((temporal - coarse.temporal_mean.sum()).abs() < 1e-12);
    }
    // a sample whose target logit moves well away from the baseline
    let x = padded_sample(&model, 3, 10);
    let map = integrated_gradients(&model, &x, None, 128, None).unwrap();
    assert!((map.f_input - map.f_baseline).abs() > 0.1);
    assert!(map.completeness_residual <= 0.01, "residual {}", map.completeness_residual);
}

#[test]
fn explicit_target_and_range_check() {
    let model = tiny_model(2);
    let x = padded_sample(&model, 2, 1);
    let a = integrated_gradients(&model, &x, None, 8, Some(0)).unwrap();
    let b = integrated_gradients(&model, &x, None, 8, Some(1)).unwrap();
    assert_eq!((a.target, b.target), (0, 1));
    assert!(integrated_gradients(&model, &x, None, 8, Some(2)).is_err());
}

#[test]
fn cohort_map_averages_correct_samples_only() {
    let model = tiny_model(5);
    let xs: Vec<Tensor> = (0..6).map(|s| padded_sample(&model, 2, 40 + s)).collect();
    let refs: Vec<&Tensor> = xs.iter().collect();
    let x = Tensor::stack(&refs).unwrap();
    let predicted = class_scores(&model.forward(&x).unwrap()).1;
    // flip two labels so that exactly those samples are misclassified
    let mut y: Vec<f64> = predicted.iter().map(|&p| p as f64).collect();
    y[1] = 1.0 - y[1];
    y[4] = 1.0 - y[4];
    let data = Dataset::new(x, y, Task::BinaryClassification).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let cohort = cohort_attribution(&model, &data, &idx, 4).unwrap();
    assert_eq!(cohort.used, vec![0, 2, 3, 5]);
    let mut mean = Tensor::zeros(&[7, 7]);
    for m in &cohort.maps {
        mean.add_assign(&m.temporal_mean);
    }
    assert!(mean.map(|v| v / 4.0).max_abs_diff(&cohort.mean) < 1e-15);
    let acc = evaluate_indices(&model, &data, &idx, 6).unwrap().acc.unwrap();
    assert!((acc - 4.0 / 6.0).abs() < 1e-15);
}

#[test]
fn output_gradient_matches_finite_differences() {
    let model = tiny_model(3);
    let x = padded_sample(&model, 3, 10);
    let xb = with_batch_axis(&x).unwrap();
    let g = output_gradient(&model, &xb, 1).unwrap();
    let f = |t: &Tensor| Ok(model.forward(t)?[1]);
    let report = crate::gradcheck::check_input(f, &xb, &g, 1e-5).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
