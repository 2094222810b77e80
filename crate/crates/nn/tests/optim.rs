use radiomap_nn::{Adam, AdamConfig, NnError, Tensor};

#[test]
fn first_step_matches_closed_form() {
    let cfg = AdamConfig::default();
    let mut adam = Adam::new(cfg);
    let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let g = vec![Tensor::new(vec![3], vec![0.3, -4.0, 1e-6]).unwrap()];
    adam.step(&mut p, &g).unwrap();
    // Bias-corrected moments after one step are g and g^2.
    for (i, (&w0, &gi)) in [1.0f64, -2.0, 0.5].iter().zip(&[0.3f64, -4.0, 1e-6]).enumerate() {
        let expected = w0 - cfg.lr * gi / (gi.abs() + cfg.epsilon);
        assert!((p[0].data()[i] as f64 - expected).abs() < 1e-6, "{i}: {} vs {expected}", p[0].data()[i]);
    }
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn minimises_a_quadratic() {
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
    let mut p = vec![Tensor::new(vec![1], vec![3.0]).unwrap()];
    for _ in 0..100 {
        let w = p[0].data()[0];
        let g = vec![Tensor::new(vec![1], vec![2.0 * w]).unwrap()];
        adam.step(&mut p, &g).unwrap();
    }
    assert!(p[0].data()[0].abs() < 0.5, "{}", p[0].data()[0]);
}

#[test]
fn shape_mismatch_is_rejected_without_update() {
    let mut adam = Adam::new(AdamConfig::default());
    let mut p = vec![Tensor::zeros(&[2])];
    let g = vec![Tensor::zeros(&[3])];
    assert!(adam.step(&mut p, &g).is_err());
    assert_eq!(adam.step_count(), 0);
}

#[test]
fn infinite_gradient_is_rejected() {
    let mut adam = Adam::new(AdamConfig::default());
    let mut p = vec![Tensor::full(&[2], 1.0)];
    let g = vec![Tensor::new(vec![2], vec![f32::INFINITY, 0.0]).unwrap()];
    assert!(matches!(adam.step(&mut p, &g), Err(NnError::NonFinite(_))));
    assert_eq!(p[0].data(), &[1.0, 1.0]);
}
