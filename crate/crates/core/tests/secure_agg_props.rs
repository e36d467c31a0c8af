use deltafl::secure_agg::*;
use deltafl::superquantile::{weighted_quantile, ConformityLevel, WeightedValues};
use deltafl_oracles::{grid_minimize, relative_error};
use proptest::prelude::*;

fn contributions() -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    (1usize..6, 1usize..8).prop_flat_map(|(n, d)| {
        prop::collection::vec(
            (prop::collection::vec(-100.0..100.0f64, d), 0.01..5.0f64),
            n,
        )
    })
}

fn weighted() -> impl Strategy<Value = WeightedValues> {
    (2usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(0.05..1.0f64, n),
        )
            .prop_map(|(v, w)| WeightedValues::normalized(v, w).unwrap())
    })
}

proptest! {
    #[test]
    fn masked_matches_plain(c in contributions(), seed in any::<u64>()) {
        let plain = plain_weighted_sum(&c).unwrap();
        let (masked, transcript) = masked_weighted_sum(&c, seed, DEFAULT_MASK_SCALE).unwrap();
        prop_assert!(relative_error(&masked, &plain) <= 1e-9);
        let raw: Vec<Vec<f64>> = c.iter().map(|(v, _)| v.clone()).collect();
        let mut weighted: Vec<Vec<f64>> = c.iter().map(|(v, a)| v.iter().map(|x| a * x).chain([*a]).collect()).collect();
        weighted.extend(raw);
        let audit = audit_transcript(&transcript, &weighted, 1e-6);
        prop_assert_eq!(audit.payloads_checked, c.len());
        prop_assert_eq!(audit.is_clean(), c.len() > 1);
        prop_assert_eq!(transcript.degenerate, c.len() == 1);
    }

    #[test]
    fn aggregator_modes_agree(c in contributions(), seed in any::<u64>()) {
        let a = Aggregator::plain().weighted_average(&c).unwrap();
        let mut masked = Aggregator::masked(seed, 10.0);
        let b = masked.weighted_average(&c).unwrap();
        prop_assert!(relative_error(&b, &a) <= 1e-9);
        prop_assert_eq!(masked.calls(), 1);
    }

    #[test]
    fn mm_descends_and_reaches_a_quantile(data in weighted(), tau in 0.05..0.95f64) {
        let spec = PinballSpec::new(tau, data.clone()).unwrap();
        let out = mm_quantile(&spec, &MmOptions::default(), &mut Aggregator::plain()).unwrap();
        for pair in out.trajectory.windows(2) {
            prop_assert!(pinball_loss(&spec, pair[1]) <= pinball_loss(&spec, pair[0]) + 1e-12);
        }
        let grid = grid_minimize(|m| pinball_loss(&spec, m), -6.0, 6.0, 1e-3, 0.0);
        prop_assert!(pinball_loss(&spec, out.value) <= grid.value + 1e-6);
    }
}

#[test]
fn mm_agrees_with_sorted_quantile_when_unique() {
    let data = WeightedValues::normalized(
        vec![3.0, -1.0, 0.5, 2.0, 7.0],
        vec![0.1, 0.3, 0.2, 0.15, 0.25],
    )
    .unwrap();
    for theta in [0.9, 0.55, 0.3] {
        let spec = PinballSpec::new(1.0 - theta, data.clone()).unwrap();
        let out = mm_quantile(
            &spec,
            &MmOptions::default(),
            &mut Aggregator::masked(4, 100.0),
        )
        .unwrap();
        let q = weighted_quantile(&data, ConformityLevel::new(theta).unwrap());
        assert!(
            (out.value - q).abs() <= 1e-5,
            "theta {theta}: {} vs {q}",
            out.value
        );
    }
}

#[test]
fn masked_transcript_serializes() {
    let (_, t) = masked_sum(&[vec![1.0, 2.0], vec![3.0, 4.0]], 5, 1.0).unwrap();
    let json: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
    assert_eq!(json["server_visible"].as_array().unwrap().len(), 2);
    assert_eq!(json["degenerate"], false);
}
