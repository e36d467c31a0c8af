use deltafl::data::{
    gen_gaussian_mixture, gen_hetero_logistic, DeviceShard, HeteroLogisticSpec, Population,
};
use deltafl::fed::*;
use deltafl::models::{device_grad, Example, LossKind, LossSpec, ModelParams};
use deltafl::secure_agg::AggregationMode;
use proptest::prelude::*;

fn population(seed: u64) -> Population {
    gen_hetero_logistic(&HeteroLogisticSpec {
        num_devices: 20,
        min_size: 5,
        max_size: 25,
        feature_dim: 3,
        num_classes: 2,
        heterogeneity: 1.0,
        seed,
    })
    .unwrap()
}

fn config(theta: f64, seed: u64) -> FederationConfig {
    FederationConfig {
        theta,
        nu: 1e-3,
        devices_per_round: 6,
        local: LocalSolver::Epochs {
            epochs: 1,
            batch_size: 4,
        },
        lr: LearningRate::constant(0.2),
        rounds: 15,
        eta_period: 1,
        seed,
        loss: LossSpec::new(LossKind::BinaryLogistic, 1e-3, 2).unwrap(),
        aggregation: AggregationMode::Plain,
        eta_protocol: EtaProtocol::ServerDirect,
        filtering: FilterSite::Server,
        eval_every: 5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn filter_is_sound(theta in 0.05..1.0f64, seed in 0u64..1000) {
        let pop = population(seed);
        let out = run_federated(&pop, None, &config(theta, seed), Algorithm::DeltaFl, None).unwrap();
        for log in &out.logs {
            let eta = log.eta.unwrap();
            prop_assert!(!log.filtered.is_empty());
            for id in &log.filtered {
                let i = log.sampled.iter().position(|s| s == id);
                prop_assert!(i.is_some());
                prop_assert!(log.losses[i.unwrap()] >= eta - 1e-12);
            }
            let mut sorted = log.sampled.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(&sorted, &log.sampled);
        }
    }

    #[test]
    fn vanilla_level_reduces_to_fedavg(seed in 0u64..1000, masked in any::<bool>()) {
        let pop = population(seed);
        let mut cfg = config(1.0, seed);
        if masked {
            cfg.aggregation = AggregationMode::Masked { mask_scale: 10.0 };
        }
        let a = run_federated(&pop, None, &cfg, Algorithm::FedAvg, None).unwrap();
        let b = run_federated(&pop, None, &cfg, Algorithm::DeltaFl, None).unwrap();
        prop_assert_eq!(&a.final_model, &b.final_model);
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            prop_assert_eq!(&la.sampled, &lb.sampled);
            prop_assert_eq!(&lb.filtered, &lb.sampled);
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let pop = population(4);
    for alg in [Algorithm::FedAvg, Algorithm::DeltaFl] {
        let mut cfg = config(0.5, 9);
        cfg.local = LocalSolver::Sgd { steps: 3 };
        cfg.aggregation = AggregationMode::Masked { mask_scale: 1e3 };
        let a = run_federated(&pop, Some(&pop), &cfg, alg, None).unwrap();
        let b = run_federated(&pop, Some(&pop), &cfg, alg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logs.len(), 15);
        assert_eq!(
            a.snapshots.iter().map(|s| s.round).collect::<Vec<_>>(),
            vec![0, 5, 10, 15]
        );
        assert!(a.snapshots[0].test_error.is_some());
    }
}

#[test]
fn secure_quantile_protocol_keeps_filter_sound() {
    let pop = population(8);
    let mut cfg = config(0.3, 2);
    cfg.eta_protocol = EtaProtocol::SecureMm {
        max_iters: 2000,
        tol: 1e-12,
    };
    cfg.aggregation = AggregationMode::Masked { mask_scale: 100.0 };
    let out = run_federated(&pop, None, &cfg, Algorithm::DeltaFl, None).unwrap();
    for log in &out.logs {
        assert!(!log.filtered.is_empty() && log.filtered.len() <= log.sampled.len());
    }
}

#[test]
fn identical_shards_match_single_shard_gradient_descent() {
    let examples: Vec<Example> = vec![
        Example::new(vec![1.0, 0.5], 1),
        Example::new(vec![-0.5, 1.0], 0),
        Example::new(vec![0.3, -1.2], 1),
    ];
    let shards = (0..4)
        .map(|i| DeviceShard::new(format!("d{i}"), examples.clone(), 1.0).unwrap())
        .collect();
    let pop = Population::new(shards).unwrap();
    let mut cfg = config(0.5, 1);
    cfg.local = LocalSolver::Epochs {
        epochs: 1,
        batch_size: 3,
    };
    cfg.rounds = 5;
    let out = run_federated(&pop, None, &cfg, Algorithm::FedAvg, None).unwrap();
    let mut w = vec![0.0, 0.0];
    for _ in 0..5 {
        let g = device_grad(&cfg.loss, &w, &pop.shards()[0]).unwrap();
        w = w.iter().zip(g).map(|(a, b)| a - 0.2 * b).collect();
    }
    for (a, b) in out.final_model.iter().zip(&w) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gaussian_mixture_fedavg_reaches_centroid() {
    let means = vec![vec![0.0, 0.0], vec![1.5, 1.0], vec![4.0, 0.0]];
    let pop = gen_gaussian_mixture(&means, 200, 3).unwrap();
    let mut cfg = config(1.0, 0);
    cfg.loss = LossSpec::squared_distance();
    cfg.devices_per_round = 60;
    cfg.local = LocalSolver::Epochs {
        epochs: 1,
        batch_size: 200,
    };
    cfg.lr = LearningRate::constant(0.1);
    cfg.rounds = 300;
    cfg.eval_every = 100;
    let out = run_federated(
        &pop,
        None,
        &cfg,
        Algorithm::FedAvg,
        Some(ModelParams(vec![3.0, 3.0])),
    )
    .unwrap();
    // full participation with full-batch steps converges to the empirical centroid
    let mut centroid = [0.0; 2];
    for s in pop.shards() {
        for e in &s.examples {
            centroid[0] += e.x[0] / 600.0;
            centroid[1] += e.x[1] / 600.0;
        }
    }
    let dist = ((out.final_model[0] - centroid[0]).powi(2)
        + (out.final_model[1] - centroid[1]).powi(2))
    .sqrt();
    assert!(dist <= 1e-3, "distance {dist}");
    assert!(out.logs.iter().all(|l| l.sampled.len() == 3));
}
