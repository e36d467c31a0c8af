use deltafl::data::DeviceShard;
use deltafl::models::*;
use deltafl_oracles::{central_gradient, relative_error, FixtureRng};
use proptest::prelude::*;

fn random_example(rng: &mut FixtureRng, p: usize, classes: u32) -> Example {
    Example::new(
        (0..p).map(|_| rng.normal()).collect(),
        rng.below(classes as usize) as u32,
    )
}

fn check_point_grads(kind: LossKind, classes: usize, seed: u64) {
    let mut rng = FixtureRng::new(seed);
    for case in 0..100 {
        let p = 1 + rng.below(5);
        let spec = LossSpec::new(kind, rng.range(0.0, 0.5), classes).unwrap();
        let ex = random_example(&mut rng, p, classes as u32);
        let w: Vec<f64> = (0..spec.param_dim(p)).map(|_| rng.normal()).collect();
        let g = point_grad(&spec, &w, &ex).unwrap();
        let fd = central_gradient(|v| point_loss(&spec, v, &ex).unwrap(), &w, 1e-6);
        assert!(
            relative_error(&g, &fd) <= 1e-5,
            "{kind:?} case {case}: {g:?} vs {fd:?}"
        );
    }
}

#[test]
fn squared_distance_gradient() {
    check_point_grads(LossKind::SquaredDistance, 1, 1);
}

#[test]
fn binary_logistic_gradient() {
    check_point_grads(LossKind::BinaryLogistic, 2, 2);
}

#[test]
fn multinomial_gradient() {
    check_point_grads(LossKind::MultinomialLogistic, 4, 3);
}

#[test]
fn device_gradient_matches_finite_differences() {
    let mut rng = FixtureRng::new(9);
    let spec = LossSpec::new(LossKind::MultinomialLogistic, 0.1, 3).unwrap();
    let shard = DeviceShard::new(
        "d",
        (0..7).map(|_| random_example(&mut rng, 3, 3)).collect(),
        1.0,
    )
    .unwrap();
    let w: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
    let g = device_grad(&spec, &w, &shard).unwrap();
    let fd = central_gradient(|v| device_loss(&spec, v, &shard).unwrap(), &w, 1e-6);
    assert!(relative_error(&g, &fd) <= 1e-5);
    let obj = ShardObjective::new(spec, &shard).unwrap();
    assert_eq!(obj.grad(&w), g);
    assert_eq!(obj.loss(&w), device_loss(&spec, &w, &shard).unwrap());
}

#[test]
fn logistic_is_stable_for_large_margins() {
    let spec = LossSpec::new(LossKind::BinaryLogistic, 0.0, 2).unwrap();
    let ex = Example::new(vec![1.0], 1);
    assert!(point_loss(&spec, &[800.0], &ex).unwrap() >= 0.0);
    assert!((point_loss(&spec, &[-800.0], &ex).unwrap() - 800.0).abs() < 1e-9);
    let spec = LossSpec::new(LossKind::MultinomialLogistic, 0.0, 3).unwrap();
    let l = point_loss(&spec, &[900.0, 0.0, -900.0], &Example::new(vec![1.0], 2)).unwrap();
    assert!((l - 1800.0).abs() < 1e-9);
}

#[test]
fn errors_on_bad_inputs() {
    let spec = LossSpec::new(LossKind::MultinomialLogistic, 0.0, 3).unwrap();
    assert!(matches!(
        point_loss(&spec, &[0.0; 3], &Example::new(vec![1.0, 2.0], 0)),
        Err(deltafl::Error::DimensionMismatch { .. })
    ));
    assert!(matches!(
        point_loss(&spec, &[0.0; 3], &Example::new(vec![1.0], 3)),
        Err(deltafl::Error::LabelOutOfRange { .. })
    ));
    assert!(LossSpec::new(LossKind::BinaryLogistic, -1.0, 2).is_err());
}

fn shard_strategy() -> impl Strategy<Value = Vec<(Vec<f64>, u32)>> {
    prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 2), 0u32..3), 1..8)
}

proptest! {
    // F over a union of examples is the count-weighted mean of the parts.
    #[test]
    fn device_loss_splits_by_counts(a in shard_strategy(), b in shard_strategy(), w in prop::collection::vec(-2.0..2.0f64, 6)) {
        let spec = LossSpec::new(LossKind::MultinomialLogistic, 0.0, 3).unwrap();
        let mk = |v: &[(Vec<f64>, u32)]| v.iter().map(|(x, y)| Example::new(x.clone(), *y)).collect::<Vec<_>>();
        let sa = DeviceShard::new("a", mk(&a), 1.0).unwrap();
        let sb = DeviceShard::new("b", mk(&b), 1.0).unwrap();
        let mut all = mk(&a);
        all.extend(mk(&b));
        let sab = DeviceShard::new("ab", all, 1.0).unwrap();
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let split = (na * device_loss(&spec, &w, &sa).unwrap() + nb * device_loss(&spec, &w, &sb).unwrap()) / (na + nb);
        prop_assert!((device_loss(&spec, &w, &sab).unwrap() - split).abs() < 1e-10);
    }

    #[test]
    fn prediction_maximizes_score(x in prop::collection::vec(-3.0..3.0f64, 2), w in prop::collection::vec(-2.0..2.0f64, 6)) {
        let spec = LossSpec::new(LossKind::MultinomialLogistic, 0.0, 3).unwrap();
        let c = predict(&spec, &w, &x).unwrap() as usize;
        let score = |k: usize| w[2 * k] * x[0] + w[2 * k + 1] * x[1];
        for k in 0..3 {
            prop_assert!(score(c) >= score(k));
        }
    }
}

#[test]
fn argmax_ties_go_to_lowest_index() {
    let spec = LossSpec::new(LossKind::MultinomialLogistic, 0.0, 3).unwrap();
    assert_eq!(predict(&spec, &[0.0, 1.0, 1.0], &[1.0]).unwrap(), 1);
    assert_eq!(predict(&spec, &[0.0, 0.0, 0.0], &[1.0]).unwrap(), 0);
}

#[test]
fn gaussian_population_loss() {
    let q = QuadraticObjective::gaussian_mean_estimation(vec![1.0, -1.0]);
    assert_eq!(q.loss(&[1.0, -1.0]), 2.0);
    assert_eq!(q.loss(&[0.0, 0.0]), 4.0);
    let fd = central_gradient(|w| q.loss(w), &[0.3, 0.7], 1e-6);
    assert!(relative_error(&q.grad(&[0.3, 0.7]), &fd) < 1e-8);
}
