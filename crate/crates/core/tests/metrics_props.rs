use deltafl::metrics::*;
use proptest::prelude::*;

fn rows(values: &[f64], alphas: &[f64]) -> Vec<DeviceMetricRow> {
    values
        .iter()
        .zip(alphas)
        .enumerate()
        .map(|(i, (v, a))| DeviceMetricRow {
            id: format!("d{i:03}"),
            n_k: i + 1,
            alpha_k: *a,
            value: *v,
        })
        .collect()
}

fn train_table() -> impl Strategy<Value = DeviceMetricTable> {
    (1..30usize).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..5.0f64, n),
            prop::collection::vec(0.01..1.0f64, n),
        )
            .prop_map(|(v, a)| {
                let s: f64 = a.iter().sum();
                let a: Vec<f64> = a.iter().map(|x| x / s).collect();
                DeviceMetricTable::new(MetricKind::TrainLoss, rows(&v, &a)).unwrap()
            })
    })
}

/// Lower-value percentile by direct scan: the smallest value whose cumulative
/// weight reaches `tau / 100`.
fn scan_percentile(values: &[f64], weights: &[f64], tau: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i] / total;
        if acc >= tau / 100.0 - 1e-12 {
            return values[i];
        }
    }
    values[*idx.last().unwrap()]
}

proptest! {
    #[test]
    fn percentiles_are_monotone_and_bounded(t in train_table()) {
        let s = summarize(&t, &STANDARD_PERCENTILES).unwrap();
        let ps: Vec<f64> = STANDARD_PERCENTILES.iter().map(|&p| s.percentile(p).unwrap()).collect();
        for w in ps.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        let v = t.values();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.mean >= lo - 1e-12 && s.mean <= hi + 1e-12);
    }

    #[test]
    fn percentiles_match_cumulative_scan(t in train_table()) {
        let s = summarize(&t, &STANDARD_PERCENTILES).unwrap();
        let alphas: Vec<f64> = t.rows.iter().map(|r| r.alpha_k).collect();
        for &p in &STANDARD_PERCENTILES {
            prop_assert_eq!(s.percentile(p).unwrap(), scan_percentile(&t.values(), &alphas, p));
        }
    }

    #[test]
    fn uniform_weights_match_unweighted(v in prop::collection::vec(0.0..1.0f64, 1..30)) {
        let n = v.len();
        let train = DeviceMetricTable::new(MetricKind::TrainLoss, rows(&v, &vec![1.0 / n as f64; n])).unwrap();
        let test = DeviceMetricTable::new(MetricKind::TestError, rows(&v, &vec![0.3; n])).unwrap();
        let a = summarize(&train, &STANDARD_PERCENTILES).unwrap();
        let b = summarize(&test, &STANDARD_PERCENTILES).unwrap();
        prop_assert_eq!(a.percentiles, b.percentiles);
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn histogram_conserves_rows(t in train_table(), bins in 1..20usize) {
        let h = histogram(&t, bins).unwrap();
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), t.rows.len());
    }
}

#[test]
fn scatter_round_trip_sorts_by_id_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rows(&[0.5, 0.25, 1.0 / 3.0], &[0.2, 0.3, 0.5]);
    r.reverse();
    let table = DeviceMetricTable::new(MetricKind::TrainLoss, r.clone()).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    scatter_export(&table, &a).unwrap();
    scatter_export(&table, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next(), Some("id,n_k,alpha_k,value"));
    assert_eq!(text.lines().count(), 4);
    r.reverse();
    assert_eq!(read_scatter(&a).unwrap(), r);
}

#[test]
fn empty_table_exports_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    scatter_export(
        &DeviceMetricTable::new(MetricKind::TestError, vec![]).unwrap(),
        &path,
    )
    .unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "id,n_k,alpha_k,value\n"
    );
    assert!(read_scatter(&path).unwrap().is_empty());
    assert!(summarize(
        &DeviceMetricTable::new(MetricKind::TestError, vec![]).unwrap(),
        &[50.0]
    )
    .is_err());
}

#[test]
fn export_to_missing_directory_names_the_path() {
    let t = DeviceMetricTable::new(MetricKind::TrainLoss, rows(&[1.0], &[1.0])).unwrap();
    let err = scatter_export(&t, "/nonexistent/dir/x.csv")
        .unwrap_err()
        .to_string();
    assert!(err.contains("/nonexistent/dir/x.csv"), "{err}");
}
