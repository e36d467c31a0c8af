use std::fs;

use deltafl::data::*;
use deltafl::Error;
use proptest::prelude::*;

fn spec(seed: u64) -> HeteroLogisticSpec {
    HeteroLogisticSpec {
        num_devices: 12,
        min_size: 5,
        max_size: 30,
        feature_dim: 4,
        num_classes: 3,
        heterogeneity: 0.5,
        seed,
    }
}

#[test]
fn jsonl_round_trip_is_exact() {
    let pop = gen_hetero_logistic(&spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("devices.jsonl");
    save_devices_jsonl(&pop, &path).unwrap();
    let back = load_devices_jsonl(&path).unwrap();
    assert_eq!(back.shards(), pop.shards());
}

#[test]
fn missing_weights_default_to_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    fs::write(
        &path,
        "{\"id\":\"a\",\"x\":[[1.0],[2.0],[3.0]],\"y\":[0,1,0]}\n{\"id\":\"b\",\"x\":[[0.0]],\"y\":[1]}\n",
    )
    .unwrap();
    let pop = load_devices_jsonl(&path).unwrap();
    assert_eq!(pop.weights(), vec![0.75, 0.25]);
}

fn load_err(content: &str) -> Error {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    fs::write(&path, content).unwrap();
    load_devices_jsonl(&path).unwrap_err()
}

#[test]
fn malformed_files_are_rejected() {
    let e = load_err(
        "{\"id\":\"a\",\"x\":[[1.0]],\"y\":[0]}\n{\"id\":\"bad\",\"x\":[[1.0],[2.0]],\"y\":[0]}\n",
    );
    let msg = e.to_string();
    assert!(msg.contains("bad") && msg.contains('2'), "{msg}");
    assert!(load_err("").to_string().contains("no devices"));
    assert!(matches!(
        load_err("not json\n"),
        Error::Parse { line: 1, .. }
    ));
    assert!(load_err(
        "{\"id\":\"a\",\"x\":[[1.0]],\"y\":[0]}\n{\"id\":\"b\",\"x\":[[1.0, 2.0]],\"y\":[0]}\n"
    )
    .to_string()
    .contains('2'));
    // weights given for some devices but not others
    assert!(load_devices_jsonl_str("{\"id\":\"a\",\"x\":[[1.0]],\"y\":[0],\"weight\":1.0}\n{\"id\":\"b\",\"x\":[[1.0]],\"y\":[0]}\n").is_err());
    assert!(
        load_devices_jsonl_str("{\"id\":\"a\",\"x\":[[1.0]],\"y\":[0],\"extra\":1}\n").is_err()
    );
    assert!(matches!(
        load_devices_jsonl("/nonexistent/devices.jsonl"),
        Err(Error::Io { .. })
    ));
}

fn load_devices_jsonl_str(content: &str) -> deltafl::Result<Population> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    fs::write(&path, content).unwrap();
    load_devices_jsonl(&path)
}

#[test]
fn generator_is_seed_deterministic() {
    let a = gen_hetero_logistic(&spec(1)).unwrap();
    let b = gen_hetero_logistic(&spec(1)).unwrap();
    let c = gen_hetero_logistic(&spec(2)).unwrap();
    assert_eq!(a.shards(), b.shards());
    assert_ne!(a.shards(), c.shards());
    for s in a.shards() {
        assert!((5..=30).contains(&s.len()));
        assert!(s
            .examples
            .iter()
            .all(|e| e.y < 3 && *e.x.last().unwrap() == 1.0));
    }
}

#[test]
fn invalid_generator_specs() {
    let mut s = spec(0);
    s.heterogeneity = 1.5;
    assert!(gen_hetero_logistic(&s).is_err());
    let mut s = spec(0);
    s.min_size = 0;
    assert!(gen_hetero_logistic(&s).is_err());
    assert!(gen_gaussian_mixture(&[vec![0.0], vec![0.0, 1.0]], 3, 0).is_err());
}

proptest! {
    #[test]
    fn split_is_a_partition(frac in 0.1..0.9f64, seed in any::<u64>()) {
        let pop = gen_hetero_logistic(&spec(5)).unwrap();
        let (train, test) = split_devices(&pop, frac, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), pop.len());
        prop_assert_eq!(train.len(), (frac * 12.0).round() as usize);
        let mut ids: Vec<&str> = train.ids().into_iter().chain(test.ids()).collect();
        ids.sort();
        let mut all = pop.ids();
        all.sort();
        prop_assert_eq!(ids, all);
        prop_assert!((train.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((test.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
